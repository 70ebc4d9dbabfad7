//! Segmentation loss stack: margin loss on capsule lengths, weighted
//! cross-entropy on decoder logits, masked reconstruction, and the
//! self-supervised pretext loss.

use crate::autodiff::{axis_split, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub m_pos: f64,
    pub m_neg: f64,
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m_pos: 0.9,
            m_neg: 0.1,
            lambda: 0.5,
        }
    }
}

/// Scalar values of the three supervised terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub margin: f64,
    pub cross_entropy: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Unit-weight sum of the three terms; any non-finite term is an error.
pub fn total_loss(margin: f64, cross_entropy: f64, reconstruction: f64) -> Result<LossBreakdown> {
    for (name, v) in [("margin", margin), ("cross_entropy", cross_entropy), ("reconstruction", reconstruction)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        margin,
        cross_entropy,
        reconstruction,
        total: margin + cross_entropy + reconstruction,
    })
}

/// Inverse class frequency `total / (N · count_c)`, clamped to `[0.1, 10]`.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1;
        }
    }
    let total = labels.len() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                10.0
            } else {
                (total / (classes as f64 * c as f64)).clamp(0.1, 10.0)
            }
        })
        .collect()
}

/// One-hot encoding `[labels.len(), classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::ShapeMismatch(format!("label {l} with {classes} classes")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

impl Graph {
    /// Mean over positions of
    /// `Σ_k T_k·max(0, m⁺ − |v_k|)² + λ(1 − T_k)·max(0, |v_k| − m⁻)²`.
    ///
    /// `lengths` and `target` share a shape whose last axis is the class axis.
    pub fn margin_loss(&mut self, lengths: Var, target: &Tensor, cfg: MarginConfig) -> Result<Var> {
        if self.shape(lengths) != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "margin loss: lengths {:?} vs target {:?}",
                self.shape(lengths),
                target.shape()
            )));
        }
        let classes = *target.shape().last().unwrap();
        let positions = (target.numel() / classes) as f64;
        let MarginConfig { m_pos, m_neg, lambda } = cfg;
        let total: f64 = self
            .value(lengths)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| t * (m_pos - v).max(0.0).powi(2) + lambda * (1.0 - t) * (v - m_neg).max(0.0).powi(2))
            .sum();
        let target = target.clone();
        Ok(self.record(
            Tensor::scalar(total / positions),
            vec![lengths],
            Box::new(move |ctx: &BackwardCtx| {
                let up = ctx.grad.item() / positions;
                let g: Vec<f64> = ctx
                    .input(0)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&v, &t)| {
                        up * (-2.0 * t * (m_pos - v).max(0.0) + 2.0 * lambda * (1.0 - t) * (v - m_neg).max(0.0))
                    })
                    .collect();
                vec![Some(Tensor::from_vec(ctx.input(0).shape(), g).unwrap())]
            }),
        ))
    }

    /// Mean over pixels of `−w_t · log softmax(logits)_t`, classes along `class_axis`.
    ///
    /// `targets` lists one label per pixel in the row-major order of the
    /// logits with the class axis removed.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        class_axis: usize,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (outer, classes, inner) = axis_split(&shape, class_axis);
        if targets.len() != outer * inner {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for logits {:?}",
                targets.len(),
                shape
            )));
        }
        if weights.len() != classes || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Contract(format!("class weights {weights:?}")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::ShapeMismatch(format!("target class {bad} with {classes} classes")));
        }
        let x = self.value(logits).data();
        let pixels = targets.len() as f64;
        let mut log_probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let base = o * classes * inner + i;
                let max = (0..classes).map(|k| x[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..classes).map(|k| (x[base + k * inner] - max).exp()).sum::<f64>().ln();
                for k in 0..classes {
                    log_probs[base + k * inner] = x[base + k * inner] - lse;
                }
                let t = targets[o * inner + i];
                total -= weights[t] * log_probs[base + t * inner];
            }
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(self.record(
            Tensor::scalar(total / pixels),
            vec![logits],
            Box::new(move |ctx: &BackwardCtx| {
                let up = ctx.grad.item() / pixels;
                let mut g = vec![0.0; log_probs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * classes * inner + i;
                        let t = targets[o * inner + i];
                        let w = weights[t];
                        for k in 0..classes {
                            let p = log_probs[base + k * inner].exp();
                            let indicator = if k == t { 1.0 } else { 0.0 };
                            g[base + k * inner] = up * w * (p - indicator);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(ctx.input(0).shape(), g).unwrap())]
            }),
        ))
    }

    /// `γ / pixels · Σ (I·S − O)²`, with `I, S, O: [batch, channels, spatial...]`
    /// (`S` binary) and `pixels = batch · Π spatial`.
    pub fn masked_reconstruction_loss(
        &mut self,
        input: &Tensor,
        output: Var,
        mask: &Tensor,
        gamma: f64,
    ) -> Result<Var> {
        let shape = self.shape(output).to_vec();
        if input.shape() != shape.as_slice() || mask.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "reconstruction: input {:?}, output {:?}, mask {:?}",
                input.shape(),
                shape,
                mask.shape()
            )));
        }
        if shape.len() < 3 {
            return Err(Error::ShapeMismatch(format!("reconstruction tensors must be [N, C, spatial...], got {shape:?}")));
        }
        let pixels = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
        let scale = gamma / pixels;
        let residual: Vec<f64> = input
            .data()
            .iter()
            .zip(mask.data())
            .zip(self.value(output).data())
            .map(|((&i, &s), &o)| i * s - o)
            .collect();
        let total: f64 = residual.iter().map(|r| r * r).sum();
        Ok(self.record(
            Tensor::scalar(scale * total),
            vec![output],
            Box::new(move |ctx: &BackwardCtx| {
                let up = ctx.grad.item() * scale;
                let g: Vec<f64> = residual.iter().map(|r| -2.0 * up * r).collect();
                vec![Some(Tensor::from_vec(ctx.input(0).shape(), g).unwrap())]
            }),
        ))
    }

    /// `‖V_i − V_j‖₂ / √count`. The gradient at `V_i = V_j` is taken as zero.
    pub fn pretext_loss(&mut self, vi: Var, vj: Var) -> Result<Var> {
        if self.shape(vi) != self.shape(vj) {
            return Err(Error::ShapeMismatch(format!(
                "pretext loss: {:?} vs {:?}",
                self.shape(vi),
                self.shape(vj)
            )));
        }
        let count = self.value(vi).numel() as f64;
        let diff: Vec<f64> = self
            .value(vi)
            .data()
            .iter()
            .zip(self.value(vj).data())
            .map(|(a, b)| a - b)
            .collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let value = norm / count.sqrt();
        Ok(self.record(
            Tensor::scalar(value),
            vec![vi, vj],
            Box::new(move |ctx: &BackwardCtx| {
                let shape = ctx.input(0).shape();
                if norm == 0.0 {
                    return vec![Some(Tensor::zeros(shape)), Some(Tensor::zeros(shape))];
                }
                let k = ctx.grad.item() / (norm * count.sqrt());
                let gi: Vec<f64> = diff.iter().map(|d| k * d).collect();
                let gj: Vec<f64> = gi.iter().map(|g| -g).collect();
                vec![
                    Some(Tensor::from_vec(shape, gi).unwrap()),
                    Some(Tensor::from_vec(shape, gj).unwrap()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn margin(lengths: Vec<f64>, target: Vec<f64>) -> f64 {
        let n = lengths.len();
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_vec(&[1, n], lengths).unwrap());
        let t = Tensor::from_vec(&[1, n], target).unwrap();
        let loss = g.margin_loss(l, &t, MarginConfig::default()).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn margin_loss_unit_values() {
        assert_eq!(margin(vec![0.9, 0.1, 0.1], vec![1.0, 0.0, 0.0]), 0.0);
        assert!((margin(vec![0.0, 0.0], vec![1.0, 0.0]) - 0.81).abs() < 1e-15);
        assert!((margin(vec![0.9, 1.0], vec![1.0, 0.0]) - 0.405).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let targets = vec![0, 1, 1, 0, 0, 1, 0, 1, 1];
        let loss = g.weighted_cross_entropy(logits, 1, &targets, &[1.0, 1.0]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_limits_and_zero_weight() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 60.0]).unwrap());
        let loss = g.weighted_cross_entropy(logits, 1, &[1], &[1.0, 1.0]).unwrap();
        assert!(g.value(loss).item() < 1e-25);

        let logits = g.constant(Tensor::from_vec(&[1, 2, 1, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap());
        let loss = g.weighted_cross_entropy(logits, 1, &[0, 0], &[0.0, 1.0]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert!(g.weighted_cross_entropy(logits, 1, &[0, 2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn reconstruction_unit_values() {
        let mut g = Graph::new();
        let shape = [1, 1, 2, 2];
        let ones = Tensor::full(&shape, 1.0);
        let zero_out = g.constant(Tensor::zeros(&shape));
        let loss = g.masked_reconstruction_loss(&ones, zero_out, &ones, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 1.0);

        let loss = g
            .masked_reconstruction_loss(&ones, zero_out, &Tensor::zeros(&shape), 1.0)
            .unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let image = Tensor::from_vec(&shape, vec![0.2, 0.7, 0.4, 0.9]).unwrap();
        let mask = Tensor::from_vec(&shape, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let perfect = g.constant(Tensor::from_vec(&shape, vec![0.2, 0.0, 0.4, 0.0]).unwrap());
        let loss = g.masked_reconstruction_loss(&image, perfect, &mask, 0.001).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn pretext_normalised_norm() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2, 2]));
        let mut t = Tensor::zeros(&[2, 2, 2]);
        t.data_mut()[5] = 3.0;
        let b = g.constant(t);
        let ab = g.pretext_loss(a, b).unwrap();
        let ba = g.pretext_loss(b, a).unwrap();
        assert!((g.value(ab).item() - 3.0 / 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(g.value(ab).item(), g.value(ba).item());
        let same = g.pretext_loss(a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn total_is_additive_and_rejects_non_finite() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        let b = total_loss(0.81, 2f64.ln(), 1.0).unwrap();
        assert_eq!(b.total, 0.81 + 2f64.ln() + 1.0);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn class_weights_are_clamped_inverse_frequency() {
        let labels = [0, 0, 0, 1];
        let w = inverse_frequency_weights(&labels, 2);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((w[1] - 2.0).abs() < 1e-15);
        assert_eq!(inverse_frequency_weights(&[0; 10], 2)[1], 10.0);
    }
}
