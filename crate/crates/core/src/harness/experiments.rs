//! Evaluation drivers: plain metrics, rotation robustness, shift sensitivity
//! and the end-to-end gradient check. Each takes the model as a closure from
//! an image `[C, S...]` to class probabilities `[N, S...]`.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::arch::{build_tiny_capsnet, forward_segment, segmentation_loss, LossConfig, ModelParams, Mode, ParamKind};
use crate::autodiff::{Graph, Var};
use crate::data::{rotate_image, unrotate_mask, Axis, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, Coverage, GradcheckReport};
use crate::metrics::{argmax_labels, shift_sensitivity, Confusion, SegMetrics, SensitivityReport};
use crate::tensor::Tensor;

pub const EVAL_HEADER: &str = "class,dice,precision,recall";
pub const ROBUSTNESS_HEADER: &str = "axis,angle,dice_mean";
pub const SENSITIVITY_HEADER: &str = "sample,p_label_change,mean_abs_change";

fn check_classes(data: &Dataset, classes: usize) -> Result<()> {
    if data.classes > classes {
        return Err(Error::ManifestMismatch(format!(
            "dataset has {} classes, model {classes}",
            data.classes
        )));
    }
    Ok(())
}

/// Per-sample argmax predictions scored against the masks, confusions merged in dataset order.
pub fn evaluate<F>(data: &Dataset, classes: usize, model: F) -> Result<SegMetrics>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    check_classes(data, classes)?;
    let parts: Vec<Result<Confusion>> = data
        .samples
        .par_iter()
        .map(|s| {
            let mut c = Confusion::new(classes);
            c.add(&argmax_labels(&model(&s.image)?), &s.labels())?;
            Ok(c)
        })
        .collect();
    let mut total = Confusion::new(classes);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total.metrics())
}

pub fn eval_csv(m: &SegMetrics) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for (k, c) in m.per_class.iter().enumerate() {
        out.push_str(&format!("{k},{},{},{}\n", c.dice, c.precision, c.recall));
    }
    let n = m.per_class.len() as f64;
    let mean = |f: fn(&crate::metrics::ClassMetrics) -> f64| m.per_class.iter().map(f).sum::<f64>() / n;
    out.push_str(&format!("mean,{},{},{}\n", m.mean_dice, mean(|c| c.precision), mean(|c| c.recall)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessRow {
    pub axis: Axis,
    pub angle: f64,
    pub dice_mean: f64,
}

/// For every (axis, angle): rotate each input, predict, rotate the prediction
/// back and score it against the original mask.
pub fn robustness<F>(data: &Dataset, classes: usize, axes: &[Axis], angles: &[f64], model: F) -> Result<Vec<RobustnessRow>>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    check_classes(data, classes)?;
    if data.samples.iter().any(|s| s.spatial().len() != 3) {
        return Err(Error::Unsupported("rotation robustness needs 3D volumes".into()));
    }
    let mut rows = Vec::with_capacity(axes.len() * angles.len());
    for &axis in axes {
        for &angle in angles {
            let parts: Vec<Result<Confusion>> = data
                .samples
                .par_iter()
                .map(|s| {
                    let rotated = rotate_image(&s.image, angle, axis)?;
                    let pred: Vec<u8> = argmax_labels(&model(&rotated)?).iter().map(|&l| l as u8).collect();
                    let back = unrotate_mask(&pred, s.spatial(), angle, axis)?;
                    let back: Vec<usize> = back.iter().map(|&l| l as usize).collect();
                    let mut c = Confusion::new(classes);
                    c.add(&back, &s.labels())?;
                    Ok(c)
                })
                .collect();
            let mut total = Confusion::new(classes);
            for p in parts {
                total.merge(&p?);
            }
            rows.push(RobustnessRow { axis, angle, dice_mean: total.metrics().mean_dice });
        }
    }
    Ok(rows)
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = format!("{ROBUSTNESS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.axis, r.angle, r.dice_mean));
    }
    out
}

/// Shift sensitivity of every sample plus the mean over samples.
pub fn sensitivity<F>(data: &Dataset, model: F) -> Result<(Vec<SensitivityReport>, SensitivityReport)>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let per: Vec<Result<SensitivityReport>> =
        data.samples.par_iter().map(|s| shift_sensitivity(&model, &s.image)).collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per.len().max(1) as f64;
    let mean = SensitivityReport {
        p_label_change: per.iter().map(|r| r.p_label_change).sum::<f64>() / n,
        mean_abs_change: per.iter().map(|r| r.mean_abs_change).sum::<f64>() / n,
    };
    Ok((per, mean))
}

pub fn sensitivity_csv(per: &[SensitivityReport], mean: &SensitivityReport) -> String {
    let mut out = format!("{SENSITIVITY_HEADER}\n");
    for (i, r) in per.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", r.p_label_change, r.mean_abs_change));
    }
    out.push_str(&format!("mean,{},{}\n", mean.p_label_change, mean.mean_abs_change));
    out
}

/// Finite-difference check of the full forward and loss of the tiny capsule
/// net on one random 8×8 image. Every parameter element is perturbed.
pub fn end_to_end_gradcheck(seed: u64, routing_iters: usize, tolerance: f64) -> Result<GradcheckReport> {
    let (size, classes) = (8, 2);
    let spec = build_tiny_capsnet(size, classes, routing_iters, false)?;
    let mut params = ModelParams::init(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // a zero logit head would hide the capsule path from the cross-entropy term
    let small = Normal::new(0.0, 0.3).unwrap();
    for e in spec.param_manifest()? {
        if matches!(e.kind, ParamKind::Zero | ParamKind::Bias) {
            for v in params.params[&e.name].data_mut() {
                *v = small.sample(&mut rng);
            }
        }
    }
    let image = Tensor::from_vec(&[1, 1, size, size], (0..size * size).map(|_| rng.random::<f64>()).collect())?;
    let labels = vec![(0..size * size).map(|_| rng.random_range(0..classes)).collect::<Vec<_>>()];
    let loss_cfg = LossConfig::default();
    let f = |g: &mut Graph, _: &IndexMap<String, Var>| -> Result<Var> {
        // parameters are already bound by name, so forward picks up the probed values
        let out = forward_segment(g, &spec, &params, &image, Some(&labels), Mode::Train)?;
        Ok(segmentation_loss(g, &spec, &out, &image, &labels, &loss_cfg)?.total)
    };
    gradcheck(f, &params.params, 1e-6, tolerance, Coverage::All)
}

/// A model's probability map as a closure, for the drivers above.
pub fn predictor<'a>(spec: &'a crate::arch::NetworkSpec, params: &'a ModelParams) -> impl Fn(&Tensor) -> Result<Tensor> + Sync + 'a {
    move |image| crate::arch::predict(spec, params, image)
}
