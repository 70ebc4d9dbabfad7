use super::params::ModelParams;
use super::spec::{Activation, LayerKind, NetworkSpec};
use crate::autodiff::{ConvGeometry, Graph, Var};
use crate::capsule::CapsuleGrid;
use crate::error::{Error, Result};
use crate::losses::{inverse_frequency_weights, MarginConfig};
use crate::metrics::argmax_labels;
use crate::tensor::Tensor;

/// Batch-norm behaviour and reconstruction masking for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the reconstruction branch is masked by the true labels.
    Train,
    /// Running statistics; the reconstruction branch is masked by the predicted labels.
    Eval,
}

#[derive(Clone, Debug)]
enum Slot {
    Features(Var),
    Capsules(CapsuleGrid),
}

pub struct ForwardOutput {
    /// `[batch, classes, spatial...]`.
    pub logits: Var,
    /// Softmax of the logits over the class axis.
    pub probs: Var,
    /// Lengths of the class capsules, `[batch, spatial'..., classes]`.
    pub lengths: Var,
    pub reconstruction: Option<Var>,
    /// Output of the feature extractor, `[batch, channels, spatial...]`.
    pub extractor: Var,
    /// Batch statistics `(layer, mean, var)` of every batch-norm layer (train mode).
    pub batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

/// Binary foreground mask `[batch, channels, spatial...]` (label > 0), repeated over channels.
pub fn foreground_mask(labels: &[Vec<usize>], channels: usize, spatial: &[usize]) -> Tensor {
    let pixels: usize = spatial.iter().product();
    let mut shape = vec![labels.len(), channels];
    shape.extend(spatial);
    let mut data = Vec::with_capacity(labels.len() * channels * pixels);
    for l in labels {
        for _ in 0..channels {
            data.extend(l.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }));
        }
    }
    Tensor::from_vec(&shape, data).unwrap()
}

/// Runs the network on `input: [batch, channels, spatial...]`.
///
/// Parameters are bound into `g` by name, so gradients can be read back with
/// [`Graph::param_grads`]. `labels` (one label vector per batch item) mask the
/// reconstruction branch in train mode.
pub fn forward_segment(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &ModelParams,
    input: &Tensor,
    labels: Option<&[Vec<usize>]>,
    mode: Mode,
) -> Result<ForwardOutput> {
    let (slots, batch_stats) = run_layers(g, spec, params, input, labels, mode, spec.layers.len())?;
    let Slot::Features(logits) = slots[spec.logits] else { unreachable!() };
    let Slot::Capsules(class_caps) = &slots[spec.capsules] else { unreachable!() };
    let lengths = g.capsule_lengths(class_caps);
    let probs = g.softmax(logits, 1)?;
    let reconstruction = spec.reconstruction.map(|r| match slots[r] {
        Slot::Features(v) => v,
        Slot::Capsules(_) => unreachable!(),
    });
    Ok(ForwardOutput {
        logits,
        probs,
        lengths,
        reconstruction,
        extractor: slot_var(&slots[spec.extractor_layers]),
        batch_stats,
    })
}

fn slot_var(s: &Slot) -> Var {
    match s {
        Slot::Features(v) => *v,
        Slot::Capsules(c) => c.var,
    }
}

/// Runs only the feature-extractor layers; the pretext task compares these outputs.
pub fn forward_extractor(g: &mut Graph, spec: &NetworkSpec, params: &ModelParams, input: &Tensor) -> Result<Var> {
    let (slots, _) = run_layers(g, spec, params, input, None, Mode::Eval, spec.extractor_layers)?;
    Ok(slot_var(&slots[spec.extractor_layers]))
}

type BatchStats = Vec<(String, Vec<f64>, Vec<f64>)>;

fn run_layers(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &ModelParams,
    input: &Tensor,
    labels: Option<&[Vec<usize>]>,
    mode: Mode,
    count: usize,
) -> Result<(Vec<Slot>, BatchStats)> {
    let mut expected = vec![input.shape()[0], spec.in_channels];
    expected.extend(&spec.input_size);
    if input.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} for network expecting {:?}",
            input.shape(),
            expected
        )));
    }
    let batch = expected[0];
    let x = g.constant(input.clone());
    let mut slots = vec![Slot::Features(x)];
    let mut batch_stats = Vec::new();
    let param = |g: &mut Graph, name: &str, suffix: &str| -> Result<Var> {
        let key = format!("{name}.{suffix}");
        let t = params
            .params
            .get(&key)
            .ok_or_else(|| Error::ManifestMismatch(format!("missing parameter {key}")))?;
        Ok(g.param(&key, t))
    };
    for layer in &spec.layers[..count] {
        let name = layer.name.as_str();
        let feat = |i: usize| match &slots[layer.inputs[i]] {
            Slot::Features(v) => Ok(*v),
            Slot::Capsules(_) => Err(Error::ShapeMismatch(format!("layer {name} expects feature maps"))),
        };
        let capsules = |i: usize| match &slots[layer.inputs[i]] {
            Slot::Capsules(c) => Ok(c.clone()),
            Slot::Features(_) => Err(Error::ShapeMismatch(format!("layer {name} expects capsules"))),
        };
        let out = match &layer.kind {
            LayerKind::Conv { stride, padding, dilation, activation, .. } => {
                let (w, b) = (param(g, name, "weight")?, param(g, name, "bias")?);
                let geom = ConvGeometry::new(spec.rank, *stride, *padding, *dilation);
                let y = g.conv_nd(feat(0)?, w, &geom)?;
                let y = g.add_channel_bias(y, b)?;
                Slot::Features(activate(g, y, *activation))
            }
            LayerKind::Deconv { stride, activation, .. } => {
                let (w, b) = (param(g, name, "weight")?, param(g, name, "bias")?);
                let geom = ConvGeometry::new(spec.rank, *stride, 0, 1);
                let y = g.transposed_conv_nd(feat(0)?, w, &geom)?;
                let y = g.add_channel_bias(y, b)?;
                Slot::Features(activate(g, y, *activation))
            }
            LayerKind::BatchNorm { activation } => {
                let (gamma, beta) = (param(g, name, "gamma")?, param(g, name, "beta")?);
                let y = match mode {
                    Mode::Train => {
                        let (y, mean, var) = g.batch_norm(feat(0)?, gamma, beta, None, BN_EPS)?;
                        batch_stats.push((name.to_string(), mean, var));
                        y
                    }
                    Mode::Eval => {
                        let buf = |s: &str| {
                            params
                                .buffers
                                .get(&format!("{name}.{s}"))
                                .ok_or_else(|| Error::ManifestMismatch(format!("missing buffer {name}.{s}")))
                        };
                        let (mean, var) = (buf("running_mean")?, buf("running_var")?);
                        g.batch_norm(feat(0)?, gamma, beta, Some((mean.data(), var.data())), BN_EPS)?.0
                    }
                };
                Slot::Features(activate(g, y, *activation))
            }
            LayerKind::PrimaryCaps { dim } => {
                Slot::Capsules(g.to_primary_capsules(feat(0)?, *dim)?)
            }
            LayerKind::Capsule(p) => {
                let m = param(g, name, "transform")?;
                let b = if p.bias { Some(param(g, name, "bias")?) } else { None };
                Slot::Capsules(g.capsule_layer(&capsules(0)?, p, m, b)?)
            }
            LayerKind::ConcatCaps => {
                let parts = (0..layer.inputs.len()).map(capsules).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&CapsuleGrid> = parts.iter().collect();
                Slot::Capsules(g.concat_capsules(&refs)?)
            }
            LayerKind::ConcatFeatures => {
                let parts = (0..layer.inputs.len()).map(feat).collect::<Result<Vec<_>>>()?;
                Slot::Features(g.concat(&parts, 1)?)
            }
            LayerKind::CapsToFeatures => Slot::Features(g.capsules_to_features(&capsules(0)?)?),
            LayerKind::MaskByLabel => {
                let x = feat(0)?;
                let channels = g.shape(x)[1];
                let mask_labels = match (mode, labels) {
                    (Mode::Train, Some(l)) => l.to_vec(),
                    (Mode::Train, None) => {
                        return Err(Error::Contract("train-mode forward needs labels for the reconstruction mask".into()))
                    }
                    (Mode::Eval, _) => {
                        let Slot::Features(logits) = slots[spec.logits] else { unreachable!() };
                        split_batch(g.value(logits), batch).iter().map(argmax_labels).collect()
                    }
                };
                let mask = foreground_mask(&mask_labels, channels, &spec.input_size);
                let m = g.constant(mask);
                Slot::Features(g.mul(x, m))
            }
        };
        slots.push(out);
    }
    Ok((slots, batch_stats))
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Folds batch statistics into the running buffers.
pub fn update_running_stats(params: &mut ModelParams, stats: &[(String, Vec<f64>, Vec<f64>)]) {
    for (name, mean, var) in stats {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            if let Some(buf) = params.buffers.get_mut(&format!("{name}.{suffix}")) {
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    }
}

/// Splits `[batch, rest...]` into `batch` tensors of shape `[rest...]`.
pub fn split_batch(t: &Tensor, batch: usize) -> Vec<Tensor> {
    let per = t.numel() / batch;
    t.data()
        .chunks(per)
        .map(|c| Tensor::from_vec(&t.shape()[1..], c.to_vec()).unwrap())
        .collect()
}

/// Stacks same-shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let shape = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch(format!("cannot stack {:?} with {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

/// Nearest-neighbour reduction of a label grid to `target` extents.
pub fn downsample_labels(labels: &[usize], spatial: &[usize], target: &[usize]) -> Vec<usize> {
    let out_len: usize = target.iter().product();
    let in_strides = crate::tensor::strides_of(spatial);
    let out_strides = crate::tensor::strides_of(target);
    (0..out_len)
        .map(|flat| {
            let mut src = 0;
            for a in 0..target.len() {
                let i = (flat / out_strides[a]) % target[a];
                let f = spatial[a] / target[a];
                src += (i * f + f / 2) * in_strides[a];
            }
            labels[src]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassWeighting {
    Uniform,
    /// Inverse class frequency of the batch, clamped to `[0.1, 10]`.
    InverseFrequency,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: MarginConfig,
    pub gamma: f64,
    pub weighting: ClassWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: MarginConfig::default(),
            gamma: 0.001,
            weighting: ClassWeighting::InverseFrequency,
        }
    }
}

/// Graph nodes of the three supervised terms and their sum.
pub struct LossVars {
    pub margin: Var,
    pub cross_entropy: Var,
    pub reconstruction: Option<Var>,
    pub total: Var,
}

/// Margin loss on the class capsules (against labels reduced to their
/// resolution), weighted cross-entropy on the logits, and the masked
/// reconstruction loss when the branch exists.
pub fn segmentation_loss(
    g: &mut Graph,
    spec: &NetworkSpec,
    out: &ForwardOutput,
    input: &Tensor,
    labels: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<LossVars> {
    let n = spec.classes;
    let caps_shape = g.shape(out.lengths).to_vec();
    let caps_spatial = &caps_shape[1..caps_shape.len() - 1];
    let mut onehot = Vec::new();
    let mut flat_labels = Vec::new();
    for l in labels {
        if let Some(&bad) = l.iter().find(|&&v| v >= n) {
            return Err(Error::ShapeMismatch(format!("label {bad} with {n} classes")));
        }
        for v in downsample_labels(l, &spec.input_size, caps_spatial) {
            onehot.extend((0..n).map(|k| if k == v { 1.0 } else { 0.0 }));
        }
        flat_labels.extend_from_slice(l);
    }
    let target = Tensor::from_vec(&caps_shape, onehot)?;
    let margin = g.margin_loss(out.lengths, &target, cfg.margin)?;
    let weights = match cfg.weighting {
        ClassWeighting::Uniform => vec![1.0; n],
        ClassWeighting::InverseFrequency => inverse_frequency_weights(&flat_labels, n),
    };
    let cross_entropy = g.weighted_cross_entropy(out.logits, 1, &flat_labels, &weights)?;
    let mut total = g.add(margin, cross_entropy);
    let reconstruction = match out.reconstruction {
        Some(r) => {
            let mask = foreground_mask(labels, spec.in_channels, &spec.input_size);
            let loss = g.masked_reconstruction_loss(input, r, &mask, cfg.gamma)?;
            total = g.add(total, loss);
            Some(loss)
        }
        None => None,
    };
    Ok(LossVars {
        margin,
        cross_entropy,
        reconstruction,
        total,
    })
}

/// Class probabilities `[classes, spatial...]` for one image in eval mode.
pub fn predict(spec: &NetworkSpec, params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = stack(&[image])?;
    let out = forward_segment(&mut g, spec, params, &input, None, Mode::Eval)?;
    Ok(split_batch(g.value(out.probs), 1).remove(0))
}

/// Per-position label of the longest class capsule (Multi-SegCaps rule),
/// at the class-capsule resolution.
pub fn length_labels(g: &Graph, out: &ForwardOutput) -> Vec<usize> {
    let l = g.value(out.lengths);
    let n = *l.shape().last().unwrap();
    l.data()
        .chunks(n)
        .map(|c| (1..n).fold(0, |best, k| if c[k] > c[best] { k } else { best }))
        .collect()
}
