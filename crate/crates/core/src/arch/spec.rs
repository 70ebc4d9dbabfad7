use std::fmt::Write as _;

use crate::autodiff::ConvGeometry;
use crate::capsule::{CapsuleLayerParams, CapsuleMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution with bias; weights `[out, in, k...]`.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        activation: Activation,
    },
    /// Transposed convolution with bias; weights `[in, out, k...]`.
    Deconv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
    /// Per-channel batch normalisation followed by an activation.
    BatchNorm { activation: Activation },
    /// Reshape of feature maps into capsules of dimension `dim` (no squash).
    PrimaryCaps { dim: usize },
    /// Convolutional or deconvolutional capsule layer.
    Capsule(CapsuleLayerParams),
    /// Capsule grids joined along the type axis.
    ConcatCaps,
    /// Feature maps joined along the channel axis.
    ConcatFeatures,
    /// Capsule grid flattened back to `types * dim` feature channels.
    CapsToFeatures,
    /// Feature maps multiplied by the binary reconstruction mask.
    MaskByLabel,
}

/// One layer. Input slot 0 is the network input; slot `i + 1` is the output of layer `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

/// Shape of a slot, without the batch axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotShape {
    Features { channels: usize, spatial: Vec<usize> },
    Capsules { types: usize, dim: usize, spatial: Vec<usize> },
}

impl SlotShape {
    pub fn spatial(&self) -> &[usize] {
        match self {
            SlotShape::Features { spatial, .. } | SlotShape::Capsules { spatial, .. } => spatial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub arch: String,
    pub rank: usize,
    pub in_channels: usize,
    pub input_size: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Slot holding the final capsule grid (one type per class).
    pub capsules: usize,
    /// Slot holding the class logits `[classes, spatial...]`.
    pub logits: usize,
    /// Slot holding the reconstruction, when the branch is present.
    pub reconstruction: Option<usize>,
    /// Layers `[..extractor_layers]` form the feature extractor; its output is slot `extractor_layers`.
    pub extractor_layers: usize,
}

/// Name and shape of one trainable or buffer tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    Zero,
    Gamma,
    /// `children` counts kernel taps times input types.
    CapsTransform { children: usize, out_types: usize, out_dim: usize },
    /// Non-trainable running statistics.
    RunningMean,
    RunningVar,
}

fn mismatch<T>(layer: &str, msg: String) -> Result<T> {
    Err(Error::ShapeMismatch(format!("layer {layer}: {msg}")))
}

impl NetworkSpec {
    /// Shape of every slot; fails if any layer's inputs are inconsistent.
    pub fn infer(&self) -> Result<Vec<SlotShape>> {
        let mut slots = vec![SlotShape::Features {
            channels: self.in_channels,
            spatial: self.input_size.clone(),
        }];
        for (idx, layer) in self.layers.iter().enumerate() {
            let name = &layer.name;
            if layer.inputs.is_empty() || layer.inputs.iter().any(|&i| i > idx) {
                return mismatch(name, format!("inputs {:?} must refer to earlier slots", layer.inputs));
            }
            let first = &slots[layer.inputs[0]];
            let out = match (&layer.kind, first) {
                (LayerKind::Conv { out_channels, kernel, stride, padding, dilation, .. }, SlotShape::Features { spatial, .. }) => {
                    let geom = ConvGeometry::new(self.rank, *stride, *padding, *dilation);
                    let spatial = spatial
                        .iter()
                        .enumerate()
                        .map(|(a, &s)| geom.conv_out(a, s, *kernel))
                        .collect::<Option<Vec<_>>>();
                    let Some(spatial) = spatial else {
                        return mismatch(name, "kernel larger than padded input".into());
                    };
                    SlotShape::Features { channels: *out_channels, spatial }
                }
                (LayerKind::Deconv { out_channels, kernel, stride, .. }, SlotShape::Features { spatial, .. }) => SlotShape::Features {
                    channels: *out_channels,
                    spatial: spatial.iter().map(|&s| (s - 1) * stride + kernel).collect(),
                },
                (LayerKind::BatchNorm { .. } | LayerKind::MaskByLabel, f @ SlotShape::Features { .. }) => f.clone(),
                (LayerKind::PrimaryCaps { dim }, SlotShape::Features { channels, spatial }) => {
                    if *dim == 0 || channels % dim != 0 {
                        return mismatch(name, format!("{channels} channels not divisible by capsule dim {dim}"));
                    }
                    SlotShape::Capsules { types: channels / dim, dim: *dim, spatial: spatial.clone() }
                }
                (LayerKind::Capsule(p), SlotShape::Capsules { types, dim, spatial }) => {
                    if (*types, *dim) != (p.in_types, p.in_dim) || p.rank() != self.rank {
                        return mismatch(name, format!("expects {}x{} capsules, got {types}x{dim}", p.in_types, p.in_dim));
                    }
                    SlotShape::Capsules {
                        types: p.out_types,
                        dim: p.out_dim,
                        spatial: p.output_spatial(spatial)?,
                    }
                }
                (LayerKind::ConcatCaps, SlotShape::Capsules { dim, spatial, .. }) => {
                    let mut total = 0;
                    for &i in &layer.inputs {
                        match &slots[i] {
                            SlotShape::Capsules { types, dim: d, spatial: s } if d == dim && s == spatial => total += types,
                            other => return mismatch(name, format!("skip connection joins {first:?} with {other:?}")),
                        }
                    }
                    SlotShape::Capsules { types: total, dim: *dim, spatial: spatial.clone() }
                }
                (LayerKind::ConcatFeatures, SlotShape::Features { spatial, .. }) => {
                    let mut total = 0;
                    for &i in &layer.inputs {
                        match &slots[i] {
                            SlotShape::Features { channels, spatial: s } if s == spatial => total += channels,
                            other => return mismatch(name, format!("skip connection joins {first:?} with {other:?}")),
                        }
                    }
                    SlotShape::Features { channels: total, spatial: spatial.clone() }
                }
                (LayerKind::CapsToFeatures, SlotShape::Capsules { types, dim, spatial }) => SlotShape::Features {
                    channels: types * dim,
                    spatial: spatial.clone(),
                },
                (kind, shape) => return mismatch(name, format!("{kind:?} cannot take {shape:?}")),
            };
            slots.push(out);
        }
        match slots.get(self.capsules) {
            Some(SlotShape::Capsules { types, .. }) if *types == self.classes => {}
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "final capsule slot must hold {} types, found {other:?}",
                    self.classes
                )))
            }
        }
        match slots.get(self.logits) {
            Some(SlotShape::Features { channels, spatial }) if *channels == self.classes && *spatial == self.input_size => {}
            other => return Err(Error::ShapeMismatch(format!("logit slot has shape {other:?}"))),
        }
        if let Some(r) = self.reconstruction {
            match slots.get(r) {
                Some(SlotShape::Features { channels, spatial }) if *channels == self.in_channels && *spatial == self.input_size => {}
                other => return Err(Error::ShapeMismatch(format!("reconstruction slot has shape {other:?}"))),
            }
        }
        Ok(slots)
    }

    /// Every tensor the network owns, in layer order.
    pub fn param_manifest(&self) -> Result<Vec<ParamEntry>> {
        let slots = self.infer()?;
        let mut out = Vec::new();
        let entry = |name: &str, suffix: &str, shape: Vec<usize>, kind| ParamEntry {
            name: format!("{name}.{suffix}"),
            shape,
            kind,
        };
        for layer in &self.layers {
            let n = &layer.name;
            let input = &slots[layer.inputs[0]];
            match (&layer.kind, input) {
                (LayerKind::Conv { out_channels, kernel, .. }, SlotShape::Features { channels, .. }) => {
                    let mut shape = vec![*out_channels, *channels];
                    shape.extend(std::iter::repeat_n(*kernel, self.rank));
                    let fan_in = channels * kernel.pow(self.rank as u32);
                    out.push(entry(n, "weight", shape, ParamKind::ConvWeight { fan_in }));
                    out.push(entry(n, "bias", vec![*out_channels], ParamKind::Bias));
                }
                (LayerKind::Deconv { out_channels, kernel, stride, .. }, SlotShape::Features { channels, .. }) => {
                    let mut shape = vec![*channels, *out_channels];
                    shape.extend(std::iter::repeat_n(*kernel, self.rank));
                    // each output pixel sees about (k / stride)^rank taps per input channel
                    let taps = (kernel / stride).max(1).pow(self.rank as u32);
                    out.push(entry(n, "weight", shape, ParamKind::ConvWeight { fan_in: channels * taps }));
                    out.push(entry(n, "bias", vec![*out_channels], ParamKind::Bias));
                }
                (LayerKind::BatchNorm { .. }, SlotShape::Features { channels, .. }) => {
                    out.push(entry(n, "gamma", vec![*channels], ParamKind::Gamma));
                    out.push(entry(n, "beta", vec![*channels], ParamKind::Bias));
                    out.push(entry(n, "running_mean", vec![*channels], ParamKind::RunningMean));
                    out.push(entry(n, "running_var", vec![*channels], ParamKind::RunningVar));
                }
                (LayerKind::Capsule(p), _) => {
                    let children = p.kernel_volume() * p.in_types;
                    out.push(entry(
                        n,
                        "transform",
                        p.transform_shape(),
                        ParamKind::CapsTransform { children, out_types: p.out_types, out_dim: p.out_dim },
                    ));
                    if p.bias {
                        out.push(entry(n, "bias", p.bias_shape(), ParamKind::Bias));
                    }
                }
                _ => {}
            }
        }
        // the class head starts at zero so initial predictions are uniform
        let logit_layer = &self.layers[self.logits - 1].name;
        for e in out.iter_mut() {
            if e.name == format!("{logit_layer}.weight") {
                e.kind = ParamKind::Zero;
            }
        }
        Ok(out)
    }

    /// Human-readable summary of every layer and its output shape.
    pub fn describe(&self) -> Result<String> {
        let slots = self.infer()?;
        let mut s = format!("{} ({}D, {} classes)\n", self.arch, self.rank, self.classes);
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "  {:<12} <- {:?}  {:?}", l.name, l.inputs, slots[i + 1]);
        }
        Ok(s)
    }
}

/// Layer list under construction; returns slot indices.
pub(crate) struct Builder {
    pub layers: Vec<LayerSpec>,
}

impl Builder {
    pub fn new() -> Self {
        Builder { layers: Vec::new() }
    }

    pub fn add(&mut self, name: &str, kind: LayerKind, inputs: &[usize]) -> usize {
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            inputs: inputs.to_vec(),
        });
        self.layers.len()
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn caps(
    mode: CapsuleMode,
    rank: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: (usize, usize),
    output: (usize, usize),
    routing_iters: usize,
) -> LayerKind {
    LayerKind::Capsule(CapsuleLayerParams {
        mode,
        kernel: vec![kernel; rank],
        stride,
        padding,
        in_types: input.0,
        in_dim: input.1,
        out_types: output.0,
        out_dim: output.1,
        routing_iters,
        bias: false,
    })
}
