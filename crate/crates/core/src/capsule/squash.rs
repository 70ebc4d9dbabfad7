use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::tensor::Tensor;

/// Norm floor used only where the derivative divides by |s|.
pub const SQUASH_EPS: f64 = 1e-12;

/// Length scale `|s| / (1 + |s|²)`; multiplying `s` by it gives the squashed vector.
#[inline]
fn squash_factor(norm_sq: f64) -> f64 {
    norm_sq.sqrt() / (1.0 + norm_sq)
}

/// Squashes one capsule vector in place of `out`.
#[inline]
pub fn squash_into(s: &[f64], out: &mut [f64]) {
    let nsq: f64 = s.iter().map(|x| x * x).sum();
    let f = squash_factor(nsq);
    for (o, &x) in out.iter_mut().zip(s) {
        *o = f * x;
    }
}

/// Vector-Jacobian product of squash at `s`: accumulates `Jᵀ·gv` into `gs`.
#[inline]
pub fn squash_vjp(s: &[f64], gv: &[f64], gs: &mut [f64]) {
    let nsq: f64 = s.iter().map(|x| x * x).sum();
    let n = nsq.sqrt();
    let f = n / (1.0 + nsq);
    let df = (1.0 - nsq) / ((1.0 + nsq) * (1.0 + nsq));
    let radial = df / n.max(SQUASH_EPS) * s.iter().zip(gv).map(|(a, b)| a * b).sum::<f64>();
    for ((g, &x), &up) in gs.iter_mut().zip(s).zip(gv) {
        *g += f * up + radial * x;
    }
}

/// Squash of every capsule along the last axis of `s`.
pub fn squash_values(s: &Tensor) -> Tensor {
    let dim = *s.shape().last().expect("squash needs a capsule axis");
    let mut out = vec![0.0; s.numel()];
    for (src, dst) in s.data().chunks(dim).zip(out.chunks_mut(dim)) {
        squash_into(src, dst);
    }
    Tensor::from_vec(s.shape(), out).unwrap()
}

impl Graph {
    /// `v = |s|²/(1+|s|²) · s/|s|` over the last axis, with `squash(0) = 0`.
    pub fn squash(&mut self, s: Var) -> Var {
        let value = squash_values(self.value(s));
        let dim = *self.shape(s).last().unwrap();
        self.record(
            value,
            vec![s],
            Box::new(move |ctx: &BackwardCtx| {
                let input = ctx.input(0);
                let mut gs = vec![0.0; input.numel()];
                for ((sv, gv), out) in input
                    .data()
                    .chunks(dim)
                    .zip(ctx.grad.data().chunks(dim))
                    .zip(gs.chunks_mut(dim))
                {
                    squash_vjp(sv, gv, out);
                }
                vec![Some(Tensor::from_vec(input.shape(), gs).unwrap())]
            }),
        )
    }

    /// Euclidean length of every vector along the last axis; drops that axis.
    pub fn vector_lengths(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        let lengths: Vec<f64> = self
            .value(x)
            .data()
            .chunks(dim)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let value = Tensor::from_vec(&out_shape, lengths).unwrap();
        self.record(
            value,
            vec![x],
            Box::new(move |ctx: &BackwardCtx| {
                let input = ctx.input(0);
                let mut gx = vec![0.0; input.numel()];
                for (((xv, &len), &g), out) in input
                    .data()
                    .chunks(dim)
                    .zip(ctx.output.data())
                    .zip(ctx.grad.data())
                    .zip(gx.chunks_mut(dim))
                {
                    if len > SQUASH_EPS {
                        for (o, &v) in out.iter_mut().zip(xv) {
                            *o = g * v / len;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(input.shape(), gx).unwrap())]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn analytic_lengths() {
        let zero = squash_values(&Tensor::zeros(&[3]));
        assert_eq!(zero.data(), &[0.0; 3]);

        let unit = Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap();
        let v = squash_values(&unit);
        assert!((norm(v.data()) - 0.5).abs() < 1e-15);
        assert!((v.data()[0] - 0.3).abs() < 1e-15 && (v.data()[1] - 0.4).abs() < 1e-15);

        let three = Tensor::from_vec(&[3], vec![0.0, 3.0, 0.0]).unwrap();
        let v = squash_values(&three);
        assert!((norm(v.data()) - 0.9).abs() < 1e-15);
        assert_eq!(v.data()[0], 0.0);
    }

    #[test]
    fn gradient_at_zero_is_finite() {
        let mut gs = vec![0.0; 3];
        squash_vjp(&[0.0; 3], &[1.0, -1.0, 2.0], &mut gs);
        assert_eq!(gs, vec![0.0; 3]);
    }
}
