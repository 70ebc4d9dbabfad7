//! Overlap metrics and shift sensitivity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
}

/// Per-class true positive / false positive / false negative counts.
/// Counts from several samples can be merged before scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Confusion {
        Confusion {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predicted labels vs {} true labels",
                pred.len(),
                truth.len()
            )));
        }
        let n = self.classes();
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= n || t >= n {
                return Err(Error::ShapeMismatch(format!("label {} with {n} classes", p.max(t))));
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for c in 0..self.classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    pub fn metrics(&self) -> SegMetrics {
        let per_class: Vec<ClassMetrics> = (0..self.classes())
            .map(|c| {
                let (tp, fp, fn_) = (self.tp[c] as f64, self.fp[c] as f64, self.fn_[c] as f64);
                // both masks empty scores 1, exactly one empty scores 0
                let ratio = |num: f64, den: f64| if den == 0.0 { if tp + fp + fn_ == 0.0 { 1.0 } else { 0.0 } } else { num / den };
                ClassMetrics {
                    dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
                    precision: ratio(tp, tp + fp),
                    recall: ratio(tp, tp + fn_),
                }
            })
            .collect();
        let mean_dice = per_class.iter().map(|m| m.dice).sum::<f64>() / per_class.len() as f64;
        SegMetrics { per_class, mean_dice }
    }
}

pub fn seg_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<SegMetrics> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth)?;
    Ok(c.metrics())
}

/// Arg-max over the leading class axis of `probs: [N, spatial...]`.
pub fn argmax_labels(probs: &Tensor) -> Vec<usize> {
    let classes = probs.shape()[0];
    let pixels = probs.numel() / classes;
    let d = probs.data();
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for k in 1..classes {
                if d[k * pixels + p] > d[best * pixels + p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SensitivityReport {
    pub p_label_change: f64,
    pub mean_abs_change: f64,
}

/// Shifts `image: [C, spatial...]` by one pixel along every spatial axis
/// (towards higher indices), filling the vacated border with zeros.
pub fn shift_image(image: &Tensor) -> Tensor {
    let shape = image.shape();
    let strides = crate::tensor::strides_of(shape);
    let mut out = Tensor::zeros(shape);
    let src = image.data();
    let dst = out.data_mut();
    let mut idx = vec![0usize; shape.len()];
    for (flat, v) in dst.iter_mut().enumerate() {
        let mut rem = flat;
        for (a, &s) in strides.iter().enumerate() {
            idx[a] = rem / s;
            rem %= s;
        }
        if idx[1..].iter().all(|&i| i >= 1) {
            let from: usize = idx
                .iter()
                .enumerate()
                .map(|(a, &i)| if a == 0 { i } else { i - 1 } * strides[a])
                .sum();
            *v = src[from];
        }
    }
    out
}

/// Per-pixel label flips and probability changes of `model` between an image
/// and its one-pixel shift, compared over the region both predictions cover.
/// `model` maps `[C, spatial...]` to class probabilities `[N, spatial...]`.
pub fn shift_sensitivity<F>(model: F, image: &Tensor) -> Result<SensitivityReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let spatial = &image.shape()[1..];
    if spatial.is_empty() || spatial.iter().any(|&s| s < 2) {
        return Err(Error::shape(image.shape(), "shift sensitivity needs at least 2 pixels per axis"));
    }
    let base = model(image)?;
    let shifted = model(&shift_image(image))?;
    if base.shape() != shifted.shape() || &base.shape()[1..] != spatial {
        return Err(Error::ShapeMismatch(format!(
            "model output {:?} for image {:?}",
            base.shape(),
            image.shape()
        )));
    }
    let classes = base.shape()[0];
    let strides = crate::tensor::strides_of(spatial);
    let pixels: usize = spatial.iter().product();
    let (a, b) = (base.data(), shifted.data());
    let mut changed = 0usize;
    let mut aligned = 0usize;
    let mut abs_change = 0.0;
    for p in 0..pixels {
        let mut rem = p;
        let mut q = 0;
        let mut inside = true;
        for (ax, &s) in strides.iter().enumerate() {
            let i = rem / s;
            rem %= s;
            if i + 1 >= spatial[ax] {
                inside = false;
                break;
            }
            q += (i + 1) * s;
        }
        if !inside {
            continue;
        }
        aligned += 1;
        let label = |d: &[f64], at: usize| {
            (1..classes).fold(0, |best, k| if d[k * pixels + at] > d[best * pixels + at] { k } else { best })
        };
        if label(a, p) != label(b, q) {
            changed += 1;
        }
        for k in 0..classes {
            abs_change += (a[k * pixels + p] - b[k * pixels + q]).abs();
        }
    }
    Ok(SensitivityReport {
        p_label_change: changed as f64 / aligned as f64,
        mean_abs_change: abs_change / (aligned * classes) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let m = [0, 1, 1, 2, 0, 2];
        let s = seg_metrics(&m, &m, 3).unwrap();
        assert!(s.per_class.iter().all(|c| c.dice == 1.0 && c.precision == 1.0 && c.recall == 1.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let s = seg_metrics(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(s.per_class[1].dice, 0.0);
    }

    #[test]
    fn half_covered_region() {
        let truth: Vec<usize> = (0..200).map(|i| usize::from(i < 100)).collect();
        let pred: Vec<usize> = (0..200).map(|i| usize::from(i < 50)).collect();
        let s = seg_metrics(&pred, &truth, 2).unwrap();
        assert!((s.per_class[1].dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.per_class[1].precision, 1.0);
        assert_eq!(s.per_class[1].recall, 0.5);
    }

    #[test]
    fn empty_class_conventions() {
        let s = seg_metrics(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(s.per_class[1].dice, 1.0);
        let s = seg_metrics(&[0, 0], &[0, 1], 2).unwrap();
        assert_eq!(s.per_class[1], ClassMetrics { dice: 0.0, precision: 0.0, recall: 0.0 });
    }

    #[test]
    fn constant_predictor_is_insensitive() {
        let image = Tensor::create(&[1, 6, 5], crate::tensor::Init::Uniform { seed: 3, lo: 0.0, hi: 1.0 }).unwrap();
        let constant = |x: &Tensor| {
            let s = x.shape();
            let mut p = Tensor::full(&[2, s[1], s[2]], 0.3);
            p.data_mut()[..s[1] * s[2]].iter_mut().for_each(|v| *v = 0.7);
            Ok(p)
        };
        let r = shift_sensitivity(constant, &image).unwrap();
        assert_eq!(r, SensitivityReport::default());
        assert!(shift_sensitivity(constant, &Tensor::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn shift_moves_content() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift_image(&img).data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
