//! Direct N-d convolution and its transpose.
//!
//! Rank-2 problems run through the rank-3 kernels with a unit leading spatial
//! axis. Work is split across output planes only, so every element is reduced
//! in a fixed order and results do not depend on the thread count.

use rayon::prelude::*;

use super::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and dilation per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub rank: usize,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
}

impl ConvGeometry {
    pub fn new(rank: usize, stride: usize, padding: usize, dilation: usize) -> ConvGeometry {
        ConvGeometry {
            rank,
            stride: vec![stride; rank],
            padding: vec![padding; rank],
            dilation: vec![dilation; rank],
        }
    }

    /// Padding that keeps the spatial extent at stride 1 (odd effective kernels).
    pub fn same(rank: usize, kernel: usize, dilation: usize) -> ConvGeometry {
        ConvGeometry::new(rank, 1, dilation * (kernel - 1) / 2, dilation)
    }

    fn check(&self) -> Result<()> {
        if !(2..=3).contains(&self.rank)
            || self.stride.len() != self.rank
            || self.padding.len() != self.rank
            || self.dilation.len() != self.rank
        {
            return Err(Error::ShapeMismatch(format!("bad conv geometry {self:?}")));
        }
        if self.stride.iter().chain(&self.dilation).any(|&v| v == 0) {
            return Err(Error::Contract("stride and dilation must be positive".into()));
        }
        Ok(())
    }

    /// Output extent of a forward convolution along one axis.
    pub fn conv_out(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation[axis] * (kernel - 1) + 1;
        let padded = input + 2 * self.padding[axis];
        (padded >= span).then(|| (padded - span) / self.stride[axis] + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transposed_out(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let full = (input - 1) * self.stride[axis] + self.dilation[axis] * (kernel - 1) + 1;
        (full > 2 * self.padding[axis]).then(|| full - 2 * self.padding[axis])
    }

    fn lift(&self) -> Geom3 {
        let pad = 3 - self.rank;
        let mut g = Geom3 {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        };
        for a in 0..self.rank {
            g.stride[a + pad] = self.stride[a];
            g.padding[a + pad] = self.padding[a];
            g.dilation[a + pad] = self.dilation[a];
        }
        g
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom3 {
    stride: [usize; 3],
    padding: [usize; 3],
    dilation: [usize; 3],
}

/// `[N, C, d, h, w]` view of a rank-2 or rank-3 conv operand.
fn lift_shape(shape: &[usize]) -> [usize; 5] {
    match shape.len() {
        4 => [shape[0], shape[1], 1, shape[2], shape[3]],
        5 => [shape[0], shape[1], shape[2], shape[3], shape[4]],
        _ => unreachable!("conv operands are rank 4 or 5"),
    }
}

/// Output indices `o` in `0..out_len` whose tap `k` lands inside `0..in_len`.
#[inline]
fn valid_range(k: usize, out_len: usize, in_len: usize, s: usize, p: usize, d: usize) -> (usize, usize) {
    let off = k * d;
    // need 0 <= o*s + off - p < in_len
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    let hi = if in_len + p > off {
        ((in_len + p - off - 1) / s + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

struct Dims {
    n: usize,
    ci: usize,
    co: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
}

impl Dims {
    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
    fn k_vol(&self) -> usize {
        self.k.iter().product()
    }
}

fn conv_forward(x: &[f64], w: &[f64], dims: &Dims, g: &Geom3) -> Vec<f64> {
    let (in_plane, out_plane, kv) = (dims.in_plane(), dims.out_plane(), dims.k_vol());
    let [_, ih, iw] = dims.inp;
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = dims.k;
    let mut y = vec![0.0; dims.n * dims.co * out_plane];
    y.par_chunks_mut(out_plane).enumerate().for_each(|(plane, out)| {
        let n = plane / dims.co;
        let co = plane % dims.co;
        for ci in 0..dims.ci {
            let xin = &x[(n * dims.ci + ci) * in_plane..][..in_plane];
            let wk = &w[(co * dims.ci + ci) * kv..][..kv];
            for a in 0..kd {
                let (d_lo, d_hi) = valid_range(a, od, dims.inp[0], g.stride[0], g.padding[0], g.dilation[0]);
                for b in 0..kh {
                    let (h_lo, h_hi) = valid_range(b, oh, ih, g.stride[1], g.padding[1], g.dilation[1]);
                    for c in 0..kw {
                        let (w_lo, w_hi) = valid_range(c, ow, iw, g.stride[2], g.padding[2], g.dilation[2]);
                        let wv = wk[(a * kh + b) * kw + c];
                        if wv == 0.0 {
                            continue;
                        }
                        for zo in d_lo..d_hi {
                            let zi = zo * g.stride[0] + a * g.dilation[0] - g.padding[0];
                            for yo in h_lo..h_hi {
                                let yi = yo * g.stride[1] + b * g.dilation[1] - g.padding[1];
                                let orow = &mut out[(zo * oh + yo) * ow..][..ow];
                                let irow = &xin[(zi * ih + yi) * iw..][..iw];
                                let base = c * g.dilation[2];
                                for xo in w_lo..w_hi {
                                    orow[xo] += wv * irow[xo * g.stride[2] + base - g.padding[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Gradient of `conv_forward` w.r.t. its input: the transposed convolution.
fn conv_backward_data(gy: &[f64], w: &[f64], dims: &Dims, g: &Geom3) -> Vec<f64> {
    let (in_plane, out_plane, kv) = (dims.in_plane(), dims.out_plane(), dims.k_vol());
    let [_, ih, iw] = dims.inp;
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = dims.k;
    let mut gx = vec![0.0; dims.n * dims.ci * in_plane];
    gx.par_chunks_mut(in_plane).enumerate().for_each(|(plane, gin)| {
        let n = plane / dims.ci;
        let ci = plane % dims.ci;
        for co in 0..dims.co {
            let gout = &gy[(n * dims.co + co) * out_plane..][..out_plane];
            let wk = &w[(co * dims.ci + ci) * kv..][..kv];
            for a in 0..kd {
                let (d_lo, d_hi) = valid_range(a, od, dims.inp[0], g.stride[0], g.padding[0], g.dilation[0]);
                for b in 0..kh {
                    let (h_lo, h_hi) = valid_range(b, oh, ih, g.stride[1], g.padding[1], g.dilation[1]);
                    for c in 0..kw {
                        let (w_lo, w_hi) = valid_range(c, ow, iw, g.stride[2], g.padding[2], g.dilation[2]);
                        let wv = wk[(a * kh + b) * kw + c];
                        if wv == 0.0 {
                            continue;
                        }
                        for zo in d_lo..d_hi {
                            let zi = zo * g.stride[0] + a * g.dilation[0] - g.padding[0];
                            for yo in h_lo..h_hi {
                                let yi = yo * g.stride[1] + b * g.dilation[1] - g.padding[1];
                                let orow = &gout[(zo * oh + yo) * ow..][..ow];
                                let irow = &mut gin[(zi * ih + yi) * iw..][..iw];
                                let base = c * g.dilation[2];
                                for xo in w_lo..w_hi {
                                    irow[xo * g.stride[2] + base - g.padding[2]] += wv * orow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of `conv_forward` w.r.t. its kernel.
fn conv_backward_weight(x: &[f64], gy: &[f64], dims: &Dims, g: &Geom3) -> Vec<f64> {
    let (in_plane, out_plane, kv) = (dims.in_plane(), dims.out_plane(), dims.k_vol());
    let [_, ih, iw] = dims.inp;
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = dims.k;
    let mut gw = vec![0.0; dims.co * dims.ci * kv];
    gw.par_chunks_mut(kv).enumerate().for_each(|(pair, gk)| {
        let co = pair / dims.ci;
        let ci = pair % dims.ci;
        for n in 0..dims.n {
            let xin = &x[(n * dims.ci + ci) * in_plane..][..in_plane];
            let gout = &gy[(n * dims.co + co) * out_plane..][..out_plane];
            for a in 0..kd {
                let (d_lo, d_hi) = valid_range(a, od, dims.inp[0], g.stride[0], g.padding[0], g.dilation[0]);
                for b in 0..kh {
                    let (h_lo, h_hi) = valid_range(b, oh, ih, g.stride[1], g.padding[1], g.dilation[1]);
                    for c in 0..kw {
                        let (w_lo, w_hi) = valid_range(c, ow, iw, g.stride[2], g.padding[2], g.dilation[2]);
                        let mut acc = 0.0;
                        for zo in d_lo..d_hi {
                            let zi = zo * g.stride[0] + a * g.dilation[0] - g.padding[0];
                            for yo in h_lo..h_hi {
                                let yi = yo * g.stride[1] + b * g.dilation[1] - g.padding[1];
                                let orow = &gout[(zo * oh + yo) * ow..][..ow];
                                let irow = &xin[(zi * ih + yi) * iw..][..iw];
                                let base = c * g.dilation[2];
                                for xo in w_lo..w_hi {
                                    acc += orow[xo] * irow[xo * g.stride[2] + base - g.padding[2]];
                                }
                            }
                        }
                        gk[(a * kh + b) * kw + c] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn check_operands(input: &[usize], kernel: &[usize], geom: &ConvGeometry) -> Result<()> {
    geom.check()?;
    let want = geom.rank + 2;
    if input.len() != want || kernel.len() != want {
        return Err(Error::ShapeMismatch(format!(
            "rank-{} convolution needs rank-{want} input and kernel, got {:?} and {:?}",
            geom.rank, input, kernel
        )));
    }
    Ok(())
}

/// Raw forward convolution on plain tensors (no graph).
pub fn conv_nd_values(x: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (dims, out_shape) = conv_dims(x.shape(), w.shape(), geom)?;
    let y = conv_forward(x.data(), w.data(), &dims, &geom.lift());
    Tensor::from_vec(&out_shape, y)
}

fn conv_dims(xs: &[usize], ws: &[usize], geom: &ConvGeometry) -> Result<(Dims, Vec<usize>)> {
    check_operands(xs, ws, geom)?;
    if xs[1] != ws[1] {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels but kernel expects {}",
            xs[1], ws[1]
        )));
    }
    let mut out_shape = vec![xs[0], ws[0]];
    for a in 0..geom.rank {
        let o = geom.conv_out(a, xs[a + 2], ws[a + 2]).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "padded input {:?} smaller than dilated kernel {:?} on axis {a}",
                xs, ws
            ))
        })?;
        out_shape.push(o);
    }
    let xl = lift_shape(xs);
    let wl = lift_shape(ws);
    let ol = lift_shape(&out_shape);
    Ok((
        Dims {
            n: xl[0],
            ci: xl[1],
            co: wl[0],
            inp: [xl[2], xl[3], xl[4]],
            out: [ol[2], ol[3], ol[4]],
            k: [wl[2], wl[3], wl[4]],
        },
        out_shape,
    ))
}

/// Dimensions of the forward convolution whose data-gradient is a transposed
/// convolution of `ys` with kernel `ws: [C_y, C_x, k...]`.
fn transposed_dims(ys: &[usize], ws: &[usize], geom: &ConvGeometry) -> Result<(Dims, Vec<usize>)> {
    check_operands(ys, ws, geom)?;
    if ys[1] != ws[0] {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv input has {} channels but kernel expects {}",
            ys[1], ws[0]
        )));
    }
    let mut x_shape = vec![ys[0], ws[1]];
    for a in 0..geom.rank {
        let o = geom
            .transposed_out(a, ys[a + 2], ws[a + 2])
            .ok_or_else(|| Error::ShapeMismatch(format!("padding too large for {ys:?}")))?;
        x_shape.push(o);
    }
    // The forward conv of x_shape must reproduce ys exactly.
    for a in 0..geom.rank {
        if geom.conv_out(a, x_shape[a + 2], ws[a + 2]) != Some(ys[a + 2]) {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv geometry is not invertible on axis {a}"
            )));
        }
    }
    let xl = lift_shape(&x_shape);
    let wl = lift_shape(ws);
    let yl = lift_shape(ys);
    Ok((
        Dims {
            n: xl[0],
            ci: xl[1],
            co: wl[0],
            inp: [xl[2], xl[3], xl[4]],
            out: [yl[2], yl[3], yl[4]],
            k: [wl[2], wl[3], wl[4]],
        },
        x_shape,
    ))
}

/// Raw transposed convolution on plain tensors (no graph).
pub fn transposed_conv_nd_values(y: &Tensor, w: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (dims, x_shape) = transposed_dims(y.shape(), w.shape(), geom)?;
    let x = conv_backward_data(y.data(), w.data(), &dims, &geom.lift());
    Tensor::from_vec(&x_shape, x)
}

impl Graph {
    /// `input: [N, Cin, spatial...]`, `kernel: [Cout, Cin, k...]`.
    pub fn conv_nd(&mut self, input: Var, kernel: Var, geom: &ConvGeometry) -> Result<Var> {
        let (dims, out_shape) = conv_dims(self.shape(input), self.shape(kernel), geom)?;
        let g3 = geom.lift();
        let y = conv_forward(self.value(input).data(), self.value(kernel).data(), &dims, &g3);
        let value = Tensor::from_vec(&out_shape, y)?;
        Ok(self.record(
            value,
            vec![input, kernel],
            Box::new(move |ctx: &BackwardCtx| {
                let gx = ctx.needs[0].then(|| {
                    let d = conv_backward_data(ctx.grad.data(), ctx.input(1).data(), &dims, &g3);
                    Tensor::from_vec(ctx.input(0).shape(), d).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let d = conv_backward_weight(ctx.input(0).data(), ctx.grad.data(), &dims, &g3);
                    Tensor::from_vec(ctx.input(1).shape(), d).unwrap()
                });
                vec![gx, gw]
            }),
        ))
    }

    /// `input: [N, Cin, spatial...]`, `kernel: [Cin, Cout, k...]`; the adjoint of
    /// [`Graph::conv_nd`] with the same kernel tensor.
    pub fn transposed_conv_nd(&mut self, input: Var, kernel: Var, geom: &ConvGeometry) -> Result<Var> {
        let (dims, x_shape) = transposed_dims(self.shape(input), self.shape(kernel), geom)?;
        let g3 = geom.lift();
        let x = conv_backward_data(self.value(input).data(), self.value(kernel).data(), &dims, &g3);
        let value = Tensor::from_vec(&x_shape, x)?;
        Ok(self.record(
            value,
            vec![input, kernel],
            Box::new(move |ctx: &BackwardCtx| {
                let gy = ctx.needs[0].then(|| {
                    let d = conv_forward(ctx.grad.data(), ctx.input(1).data(), &dims, &g3);
                    Tensor::from_vec(ctx.input(0).shape(), d).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let d = conv_backward_weight(ctx.grad.data(), ctx.input(0).data(), &dims, &g3);
                    Tensor::from_vec(ctx.input(1).shape(), d).unwrap()
                });
                vec![gy, gw]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    /// Straight nested-loop 2-d convolution used as an oracle.
    fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, dil: usize) -> Tensor {
        let [n, ci, h, wd] = x.shape().try_into().unwrap();
        let [co, _, kh, kw] = w.shape().try_into().unwrap();
        let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
        let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for p in 0..kh {
                                for q in 0..kw {
                                    let iy = (y * stride + p * dil) as isize - pad as isize;
                                    let ix = (xo * stride + q * dil) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at(&[o, c, p, q]) * x.at(&[b, c, iy as usize, ix as usize]);
                                }
                            }
                        }
                        out.set(&[b, o, y, xo], acc);
                    }
                }
            }
        }
        out
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::create(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = rand(&[2, 3, 4, 5], 1);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        let y = conv_nd_values(&x, &w, &ConvGeometry::new(2, 1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_nd_values(&x, &w, &ConvGeometry::new(2, 1, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn dilated_conv_matches_nested_loops() {
        for (stride, pad, dil, seed) in [(1, 3, 3, 5), (2, 1, 1, 6), (1, 0, 2, 7), (3, 4, 3, 8)] {
            let x = rand(&[2, 3, 11, 9], seed);
            let w = rand(&[4, 3, 3, 3], seed + 100);
            let fast = conv_nd_values(&x, &w, &ConvGeometry::new(2, stride, pad, dil)).unwrap();
            let slow = naive_conv2d(&x, &w, stride, pad, dil);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv_nd_values(&x, &w, &ConvGeometry::new(2, 1, 0, 1)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn transposed_single_pixel_broadcast() {
        let y = Tensor::full(&[1, 1, 1, 1], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let x = transposed_conv_nd_values(&y, &w, &ConvGeometry::new(2, 2, 0, 1)).unwrap();
        assert_eq!(x.shape(), &[1, 1, 2, 2]);
        assert_eq!(x.data(), &[1.0; 4]);
        let big = transposed_conv_nd_values(&rand(&[1, 1, 2, 2], 3), &w, &ConvGeometry::new(2, 2, 0, 1)).unwrap();
        assert_eq!(big.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn adjoint_identity_2d_and_3d() {
        let cases: [(Vec<usize>, Vec<usize>, ConvGeometry); 3] = [
            (vec![2, 3, 7, 6], vec![4, 3, 3, 2], ConvGeometry::new(2, 2, 1, 1)),
            (vec![1, 2, 9, 9], vec![3, 2, 3, 3], ConvGeometry::new(2, 1, 3, 3)),
            (vec![1, 2, 6, 4, 6], vec![2, 2, 2, 2, 2], ConvGeometry::new(3, 2, 0, 1)),
        ];
        for (i, (xs, ws, geom)) in cases.into_iter().enumerate() {
            let x = rand(&xs, 10 + i as u64);
            let w = rand(&ws, 20 + i as u64);
            let cx = conv_nd_values(&x, &w, &geom).unwrap();
            let y = rand(cx.shape(), 30 + i as u64);
            let ty = transposed_conv_nd_values(&y, &w, &geom).unwrap();
            assert_eq!(ty.shape(), x.shape());
            assert!((cx.dot(&y) - x.dot(&ty)).abs() < 1e-10);
        }
    }
}
