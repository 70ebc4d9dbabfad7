use super::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{permute_data, Tensor};

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shapes agree")
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(src[base + k * inner]);
            }
            let mut total = 0.0;
            for k in 0..len {
                let e = (src[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * inner] /= total;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

impl Graph {
    fn check_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record(
            value,
            vec![a, b],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record(
            value,
            vec![a, b],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record(
            value,
            vec![a, b],
            Box::new(|ctx: &BackwardCtx| {
                let ga = ctx.needs[0].then(|| zip_map(ctx.grad, ctx.input(1), |g, y| g * y));
                let gb = ctx.needs[1].then(|| zip_map(ctx.grad, ctx.input(0), |g, x| g * x));
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.record(
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx| vec![Some(ctx.grad.map(|g| c * g))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.record(
            value,
            vec![a],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.grad.clone())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.record(
            value,
            vec![a],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(zip_map(ctx.grad, ctx.input(0), |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.record(
            value,
            vec![a],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(zip_map(ctx.grad, ctx.output, |g, y| g * y * (1.0 - y)))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(
            value,
            vec![a],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(Tensor::full(ctx.input(0).shape(), ctx.grad.item()))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let original = self.shape(a).to_vec();
        Ok(self.record(
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx| vec![Some(ctx.grad.reshape(&original).unwrap())]),
        ))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let inverse = inverse_permutation(perm);
        Ok(self.record(
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx| {
                vec![Some(permute_data(ctx.grad.data(), ctx.grad.shape(), &inverse))]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::ShapeMismatch(format!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first, s
                )));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.record(
            value,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, &len) in lens.iter().enumerate() {
                        grads[k].extend_from_slice(&g[offset..offset + len * inner]);
                        offset += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&part_shapes)
                    .zip(&ctx.needs)
                    .map(|((data, shape), &need)| {
                        need.then(|| Tensor::from_vec(shape, data).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch(format!("softmax axis {axis} on rank {}", shape.len())));
        }
        let value = softmax_values(self.value(a), axis);
        Ok(self.record(
            value,
            vec![a],
            Box::new(move |ctx: &BackwardCtx| {
                let (outer, len, inner) = axis_split(&shape, axis);
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|k| y[base + k * inner] * g[base + k * inner]).sum();
                        for k in 0..len {
                            let idx = base + k * inner;
                            out[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&shape, out).unwrap())]
            }),
        ))
    }

    /// Adds a per-channel bias `[C]` to `x: [N, C, spatial...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let channels = shape.get(1).copied().unwrap_or(0);
        if self.shape(bias) != [channels] {
            return Err(Error::ShapeMismatch(format!(
                "channel bias {:?} for input {:?}",
                self.shape(bias),
                shape
            )));
        }
        let (outer, c, inner) = axis_split(&shape, 1);
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[ch];
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.record(
            value,
            vec![x, bias],
            Box::new(move |ctx: &BackwardCtx| {
                let gb = ctx.needs[1].then(|| {
                    let g = ctx.grad.data();
                    let mut acc = vec![0.0; c];
                    for o in 0..outer {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            let base = (o * c + ch) * inner;
                            *a += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_vec(&[c], acc).unwrap()
                });
                vec![Some(ctx.grad.clone()), gb]
            }),
        ))
    }

    /// Per-channel normalisation of `x: [N, C, spatial...]`.
    ///
    /// With `stats = None` the batch statistics are used (and returned so the
    /// caller can fold them into running averages); otherwise the supplied
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = axis_split(&shape, 1);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!("batch_norm affine params for {shape:?}")));
        }
        let xs = self.value(x).data();
        let count = (outer * inner) as f64;
        let (mean, var, batch_mode) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        s += xs[base..base + inner].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        q += xs[base..base + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for k in base..base + inner {
                    xhat[k] = (xs[k] - mean[ch]) * inv_std[ch];
                    out[k] = gam[ch] * xhat[k] + bet[ch];
                }
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        let rec_shape = shape.clone();
        let rec_inv = inv_std.clone();
        let v = self.record(
            value,
            vec![x, gamma, beta],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let gam = ctx.input(1).data();
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            ggam[ch] += g[k] * xhat[k];
                            gbet[ch] += g[k];
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                gx[k] = if batch_mode {
                                    gam[ch] * rec_inv[ch] / count
                                        * (count * g[k] - gbet[ch] - xhat[k] * ggam[ch])
                                } else {
                                    gam[ch] * rec_inv[ch] * g[k]
                                };
                            }
                        }
                    }
                    Tensor::from_vec(&rec_shape, gx).unwrap()
                });
                vec![
                    gx,
                    Some(Tensor::from_vec(&[c], ggam).unwrap()),
                    Some(Tensor::from_vec(&[c], gbet).unwrap()),
                ]
            }),
        );
        Ok((v, mean, var))
    }

    /// Gathers `x` along `axis` at the given indices (nearest-neighbour style resampling).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::ShapeMismatch(format!("index_select on {shape:?} axis {axis}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let value = Tensor::from_vec(&out_shape, out)?;
        let idx = indices.to_vec();
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = (o * len + i) * inner;
                        let src = (o * idx.len() + k) * inner;
                        for t in 0..inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&shape, gx).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);

        let x = g.constant(Tensor::from_vec(&[2], vec![2f64.ln(), 1f64.ln()]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let t = Tensor::create(&[3, 5, 2], Init::Normal { seed: 11, mean: 0.0, std: 3.0 }).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let s = g.softmax(x, 1).unwrap();
        let out = g.value(s);
        for a in 0..3 {
            for c in 0..2 {
                let denom: f64 = (0..5).map(|k| t.at(&[a, k, c]).exp()).sum();
                let mut total = 0.0;
                for k in 0..5 {
                    let expect = t.at(&[a, k, c]).exp() / denom;
                    assert!((out.at(&[a, k, c]) - expect).abs() < 1e-12);
                    assert!(out.at(&[a, k, c]) >= 0.0);
                    total += out.at(&[a, k, c]);
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let t = Tensor::create(&[4, 6], Init::Normal { seed: 2, mean: 0.0, std: 1.0 }).unwrap();
        let shifted = t.map(|x| x + 17.25);
        let mut g = Graph::new();
        let a = g.constant(t);
        let b = g.constant(shifted);
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn concat_and_split_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::from_vec(&[1, 1, 2], vec![5.0, 6.0]).unwrap(), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = g.constant(Tensor::from_vec(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.mul(c, w);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[5.0, 6.0]);
    }
}
