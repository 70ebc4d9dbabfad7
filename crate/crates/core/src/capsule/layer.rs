//! Locally-constrained capsule layers.
//!
//! A [`WindowPlan`] lists, for every output position, the child positions
//! that feed it together with the kernel tap each one uses. Convolutional
//! capsules use the forward-convolution access pattern; deconvolutional
//! capsules use the transposed pattern, so a child reaches every output
//! window that covers it. Votes are then routed independently per output
//! position.

use rayon::prelude::*;

use super::grid::CapsuleGrid;
use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapsuleMode {
    Conv,
    Deconv,
}

/// Shape and routing configuration of one capsule layer. The trainable
/// tensors (transform `[k..., Cin, d_in, Cout, d_out]`, bias `[Cout, d_out]`)
/// are bound separately.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapsuleLayerParams {
    pub mode: CapsuleMode,
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub in_types: usize,
    pub in_dim: usize,
    pub out_types: usize,
    pub out_dim: usize,
    pub routing_iters: usize,
    pub bias: bool,
}

impl CapsuleLayerParams {
    pub fn rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn transform_shape(&self) -> Vec<usize> {
        let mut s = self.kernel.clone();
        s.extend([self.in_types, self.in_dim, self.out_types, self.out_dim]);
        s
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![self.out_types, self.out_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.routing_iters == 0 {
            return Err(Error::Contract("routing iterations must be >= 1".into()));
        }
        if self.stride == 0 || self.kernel.contains(&0) {
            return Err(Error::Contract("kernel extents and stride must be positive".into()));
        }
        if [self.in_types, self.in_dim, self.out_types, self.out_dim].contains(&0) {
            return Err(Error::Contract("capsule counts and dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Output spatial extents for an input grid.
    pub fn output_spatial(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "rank-{} layer on spatial {:?}",
                self.rank(),
                input
            )));
        }
        input
            .iter()
            .zip(&self.kernel)
            .map(|(&i, &k)| match self.mode {
                CapsuleMode::Conv => {
                    let padded = i + 2 * self.padding;
                    if padded < k {
                        Err(Error::ShapeMismatch(format!(
                            "kernel {:?} larger than padded input {:?}",
                            self.kernel, input
                        )))
                    } else {
                        Ok((padded - k) / self.stride + 1)
                    }
                }
                CapsuleMode::Deconv => {
                    let full = (i - 1) * self.stride + k;
                    if full <= 2 * self.padding {
                        Err(Error::ShapeMismatch(format!("padding too large for {input:?}")))
                    } else {
                        Ok(full - 2 * self.padding)
                    }
                }
            })
            .collect()
    }
}

/// One child feeding an output window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    /// Flat index of the child position in the input grid.
    pub child: usize,
    /// Flat kernel tap.
    pub kernel: usize,
}

/// Gather pattern of a capsule layer for one input size.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub in_spatial: Vec<usize>,
    pub out_spatial: Vec<usize>,
    pub kernel_volume: usize,
    /// Slots per output position; absent children are `None`.
    pub slots: usize,
    /// `[positions * slots]`.
    pub taps: Vec<Option<Tap>>,
    by_kernel: Vec<Vec<(usize, usize)>>,
    by_child: Vec<Vec<(usize, usize)>>,
}

impl WindowPlan {
    pub fn new(layer: &CapsuleLayerParams, in_spatial: &[usize]) -> Result<WindowPlan> {
        let out_spatial = layer.output_spatial(in_spatial)?;
        let rank = layer.rank();
        // per axis: for each output coordinate, the (input coordinate, kernel tap) pairs
        let mut axis_lists: Vec<Vec<Vec<(usize, usize)>>> = Vec::with_capacity(rank);
        for a in 0..rank {
            let (n_in, n_out, k) = (in_spatial[a], out_spatial[a], layer.kernel[a]);
            let s = layer.stride;
            let p = layer.padding;
            let lists: Vec<Vec<(usize, usize)>> = (0..n_out)
                .map(|o| match layer.mode {
                    CapsuleMode::Conv => (0..k)
                        .filter_map(|t| {
                            let pos = (o * s + t) as isize - p as isize;
                            (pos >= 0 && (pos as usize) < n_in).then_some((pos as usize, t))
                        })
                        .collect(),
                    CapsuleMode::Deconv => (0..n_in)
                        .filter_map(|i| {
                            let t = (o + p) as isize - (i * s) as isize;
                            (t >= 0 && (t as usize) < k).then_some((i, t as usize))
                        })
                        .collect(),
                })
                .collect();
            axis_lists.push(lists);
        }
        // Conv windows keep one slot per kernel tap so that slot order is the
        // kernel order; deconv windows pack only the children that exist.
        let per_axis_slots: Vec<usize> = (0..rank)
            .map(|a| match layer.mode {
                CapsuleMode::Conv => layer.kernel[a],
                CapsuleMode::Deconv => layer.kernel[a].div_ceil(layer.stride),
            })
            .collect();
        let slots: usize = per_axis_slots.iter().product();
        let positions: usize = out_spatial.iter().product();
        let in_strides = strides_of(in_spatial);
        let k_strides = strides_of(&layer.kernel);
        let slot_strides = strides_of(&per_axis_slots);
        let out_strides = strides_of(&out_spatial);
        let mut taps = vec![None; positions * slots];
        for pos in 0..positions {
            let coord: Vec<usize> = (0..rank).map(|a| pos / out_strides[a] % out_spatial[a]).collect();
            for slot in 0..slots {
                let mut child = 0;
                let mut kernel = 0;
                let mut present = true;
                for a in 0..rank {
                    let idx = slot / slot_strides[a] % per_axis_slots[a];
                    let entry = match layer.mode {
                        CapsuleMode::Conv => axis_lists[a][coord[a]].iter().find(|e| e.1 == idx).copied(),
                        CapsuleMode::Deconv => axis_lists[a][coord[a]].get(idx).copied(),
                    };
                    match entry {
                        Some((i, t)) => {
                            child += i * in_strides[a];
                            kernel += t * k_strides[a];
                        }
                        None => {
                            present = false;
                            break;
                        }
                    }
                }
                if present {
                    taps[pos * slots + slot] = Some(Tap { child, kernel });
                }
            }
        }
        Ok(WindowPlan::from_taps(
            in_spatial.to_vec(),
            out_spatial,
            layer.kernel_volume(),
            slots,
            taps,
        ))
    }

    /// A single window containing every child with its own transform
    /// (fully-connected routing).
    pub fn dense(children: usize) -> WindowPlan {
        let taps = (0..children).map(|c| Some(Tap { child: c, kernel: c })).collect();
        WindowPlan::from_taps(vec![children], vec![1], children, children, taps)
    }

    fn from_taps(
        in_spatial: Vec<usize>,
        out_spatial: Vec<usize>,
        kernel_volume: usize,
        slots: usize,
        taps: Vec<Option<Tap>>,
    ) -> WindowPlan {
        let n_in: usize = in_spatial.iter().product();
        let mut by_kernel = vec![Vec::new(); kernel_volume];
        let mut by_child = vec![Vec::new(); n_in];
        for (idx, tap) in taps.iter().enumerate() {
            if let Some(t) = tap {
                by_kernel[t.kernel].push((idx, t.child));
                by_child[t.child].push((idx, t.kernel));
            }
        }
        WindowPlan {
            in_spatial,
            out_spatial,
            kernel_volume,
            slots,
            taps,
            by_kernel,
            by_child,
        }
    }

    pub fn positions(&self) -> usize {
        self.out_spatial.iter().product()
    }
}

/// Sizes shared by the vote kernels.
#[derive(Clone, Copy)]
struct VoteDims {
    batch: usize,
    n_in: usize,
    positions: usize,
    slots: usize,
    cin: usize,
    din: usize,
    cout: usize,
    dout: usize,
}

impl VoteDims {
    fn block(&self) -> usize {
        self.cout * self.dout
    }
}

/// votes[b, pos, slot, ci, :, :] = u[b, child, ci, :] · M[k, ci, :, :, :] (+ bias)
fn votes_forward(u: &[f64], m: &[f64], bias: Option<&[f64]>, plan: &WindowPlan, d: VoteDims) -> Vec<f64> {
    let block = d.block();
    let per_tap = d.cin * block;
    let mut out = vec![0.0; d.batch * d.positions * d.slots * per_tap];
    out.par_chunks_mut(per_tap).enumerate().for_each(|(row, dst)| {
        let b = row / (d.positions * d.slots);
        let idx = row % (d.positions * d.slots);
        let Some(tap) = plan.taps[idx] else { return };
        for ci in 0..d.cin {
            let child = &u[((b * d.n_in + tap.child) * d.cin + ci) * d.din..][..d.din];
            let mat = &m[(tap.kernel * d.cin + ci) * d.din * block..][..d.din * block];
            let acc = &mut dst[ci * block..][..block];
            if let Some(bias) = bias {
                acc.copy_from_slice(bias);
            }
            for (k, &x) in child.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (a, &w) in acc.iter_mut().zip(&mat[k * block..][..block]) {
                    *a += x * w;
                }
            }
        }
    });
    out
}

fn votes_grad_input(gv: &[f64], m: &[f64], plan: &WindowPlan, d: VoteDims) -> Vec<f64> {
    let block = d.block();
    let per_tap = d.cin * block;
    let mut gu = vec![0.0; d.batch * d.n_in * d.cin * d.din];
    gu.par_chunks_mut(d.cin * d.din).enumerate().for_each(|(row, dst)| {
        let b = row / d.n_in;
        let child = row % d.n_in;
        for &(idx, kernel) in &plan.by_child[child] {
            let g = &gv[(b * d.positions * d.slots + idx) * per_tap..][..per_tap];
            for ci in 0..d.cin {
                let gblk = &g[ci * block..][..block];
                let mat = &m[(kernel * d.cin + ci) * d.din * block..][..d.din * block];
                for k in 0..d.din {
                    let dot: f64 = mat[k * block..][..block].iter().zip(gblk).map(|(a, b)| a * b).sum();
                    dst[ci * d.din + k] += dot;
                }
            }
        }
    });
    gu
}

fn votes_grad_transform(u: &[f64], gv: &[f64], plan: &WindowPlan, d: VoteDims) -> Vec<f64> {
    let block = d.block();
    let per_tap = d.cin * block;
    let mut gm = vec![0.0; plan.kernel_volume * d.cin * d.din * block];
    gm.par_chunks_mut(d.din * block).enumerate().for_each(|(row, dst)| {
        let kernel = row / d.cin;
        let ci = row % d.cin;
        for b in 0..d.batch {
            for &(idx, child) in &plan.by_kernel[kernel] {
                let x = &u[((b * d.n_in + child) * d.cin + ci) * d.din..][..d.din];
                let g = &gv[(b * d.positions * d.slots + idx) * per_tap + ci * block..][..block];
                for (k, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (a, &gval) in dst[k * block..][..block].iter_mut().zip(g) {
                        *a += xv * gval;
                    }
                }
            }
        }
    });
    gm
}

fn votes_grad_bias(gv: &[f64], plan: &WindowPlan, d: VoteDims) -> Vec<f64> {
    let block = d.block();
    let per_tap = d.cin * block;
    let mut gb = vec![0.0; block];
    for b in 0..d.batch {
        for (idx, tap) in plan.taps.iter().enumerate() {
            if tap.is_none() {
                continue;
            }
            let g = &gv[(b * d.positions * d.slots + idx) * per_tap..][..per_tap];
            for blk in g.chunks(block) {
                for (a, &v) in gb.iter_mut().zip(blk) {
                    *a += v;
                }
            }
        }
    }
    gb
}

impl Graph {
    /// Prediction vectors for every output window.
    ///
    /// `children: [batch, in_positions, Cin, d_in]`,
    /// `transform: [kernel_volume, Cin, d_in, Cout, d_out]`, optional
    /// `bias: [Cout, d_out]` (added for present children only). Returns
    /// `[batch * out_positions, slots * Cin, Cout, d_out]`.
    pub fn capsule_votes(
        &mut self,
        children: Var,
        transform: Var,
        bias: Option<Var>,
        plan: &WindowPlan,
    ) -> Result<Var> {
        let [batch, n_in, cin, din]: [usize; 4] = self
            .shape(children)
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("children must be rank 4, got {:?}", self.shape(children))))?;
        let ts = self.shape(transform).to_vec();
        if ts.len() != 5 || ts[0] != plan.kernel_volume || ts[1] != cin || ts[2] != din {
            return Err(Error::ShapeMismatch(format!(
                "transform {ts:?} for children [{batch}, {n_in}, {cin}, {din}] and kernel volume {}",
                plan.kernel_volume
            )));
        }
        if n_in != plan.in_spatial.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "plan built for {:?} positions, children have {n_in}",
                plan.in_spatial
            )));
        }
        let d = VoteDims {
            batch,
            n_in,
            positions: plan.positions(),
            slots: plan.slots,
            cin,
            din,
            cout: ts[3],
            dout: ts[4],
        };
        if let Some(b) = bias {
            if self.shape(b) != [d.cout, d.dout] {
                return Err(Error::ShapeMismatch(format!("bias {:?}", self.shape(b))));
            }
        }
        let values = votes_forward(
            self.value(children).data(),
            self.value(transform).data(),
            bias.map(|b| self.value(b).data()),
            plan,
            d,
        );
        let value = Tensor::from_vec(&[batch * d.positions, d.slots * cin, d.cout, d.dout], values)?;
        let plan = plan.clone();
        let mut inputs = vec![children, transform];
        inputs.extend(bias);
        Ok(self.record(
            value,
            inputs,
            Box::new(move |ctx: &BackwardCtx| {
                let gv = ctx.grad.data();
                let gu = ctx.needs[0].then(|| {
                    let g = votes_grad_input(gv, ctx.input(1).data(), &plan, d);
                    Tensor::from_vec(ctx.input(0).shape(), g).unwrap()
                });
                let gm = ctx.needs[1].then(|| {
                    let g = votes_grad_transform(ctx.input(0).data(), gv, &plan, d);
                    Tensor::from_vec(ctx.input(1).shape(), g).unwrap()
                });
                let mut grads = vec![gu, gm];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        Tensor::from_vec(ctx.input(2).shape(), votes_grad_bias(gv, &plan, d)).unwrap()
                    }));
                }
                grads
            }),
        ))
    }

    /// Fully-connected votes: every child `i` votes for every parent with its
    /// own matrix. `children: [batch, n, d_in]`, `weights: [n, d_in, J, d_out]`,
    /// `bias: [J, d_out]`. Returns `[batch, n, J, d_out]`.
    pub fn dense_votes(&mut self, children: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let [batch, n, din]: [usize; 3] = self
            .shape(children)
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("children must be [batch, n, d], got {:?}", self.shape(children))))?;
        let ws = self.shape(weights).to_vec();
        if ws.len() != 4 || ws[0] != n || ws[1] != din {
            return Err(Error::ShapeMismatch(format!("weights {ws:?} for children [{batch}, {n}, {din}]")));
        }
        let (j, dout) = (ws[2], ws[3]);
        if let Some(b) = bias {
            if self.shape(b) != [j, dout] {
                return Err(Error::ShapeMismatch(format!("bias {:?}", self.shape(b))));
            }
        }
        let u = self.value(children).data();
        let w = self.value(weights).data();
        let bv = bias.map(|b| self.value(b).data());
        let block = j * dout;
        let mut out = vec![0.0; batch * n * block];
        for b in 0..batch {
            for i in 0..n {
                let dst = &mut out[(b * n + i) * block..][..block];
                if let Some(bv) = bv {
                    dst.copy_from_slice(bv);
                }
                for k in 0..din {
                    let x = u[(b * n + i) * din + k];
                    for (o, &wv) in dst.iter_mut().zip(&w[(i * din + k) * block..][..block]) {
                        *o += x * wv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[batch, n, j, dout], out)?;
        let mut inputs = vec![children, weights];
        inputs.extend(bias);
        Ok(self.record(
            value,
            inputs,
            Box::new(move |ctx: &BackwardCtx| {
                let g = ctx.grad.data();
                let u = ctx.input(0).data();
                let w = ctx.input(1).data();
                let mut gu = vec![0.0; u.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; block];
                for b in 0..batch {
                    for i in 0..n {
                        let gblk = &g[(b * n + i) * block..][..block];
                        for (a, &v) in gb.iter_mut().zip(gblk) {
                            *a += v;
                        }
                        for k in 0..din {
                            let wrow = &w[(i * din + k) * block..][..block];
                            gu[(b * n + i) * din + k] += wrow.iter().zip(gblk).map(|(a, c)| a * c).sum::<f64>();
                            let x = u[(b * n + i) * din + k];
                            for (a, &v) in gw[(i * din + k) * block..][..block].iter_mut().zip(gblk) {
                                *a += x * v;
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Some(Tensor::from_vec(ctx.input(0).shape(), gu).unwrap()),
                    Some(Tensor::from_vec(ctx.input(1).shape(), gw).unwrap()),
                ];
                if ctx.inputs.len() == 3 {
                    grads.push(Some(Tensor::from_vec(&[j, dout], gb).unwrap()));
                }
                grads
            }),
        ))
    }

    /// Convolutional or deconvolutional capsule layer (mode taken from `layer`).
    pub fn capsule_layer(
        &mut self,
        input: &CapsuleGrid,
        layer: &CapsuleLayerParams,
        transform: Var,
        bias: Option<Var>,
    ) -> Result<CapsuleGrid> {
        layer.validate()?;
        if input.types != layer.in_types || input.dim != layer.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} types of dim {}, grid has {} of dim {}",
                layer.in_types, layer.in_dim, input.types, input.dim
            )));
        }
        if self.shape(transform) != layer.transform_shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "transform {:?}, expected {:?}",
                self.shape(transform),
                layer.transform_shape()
            )));
        }
        if bias.is_some() != layer.bias {
            return Err(Error::Contract("bias presence disagrees with layer config".into()));
        }
        let plan = WindowPlan::new(layer, &input.spatial)?;
        let n_in = input.positions();
        let children = self.reshape(input.var, &[input.batch, n_in, input.types, input.dim])?;
        let kv = layer.kernel_volume();
        let m = self.reshape(transform, &[kv, layer.in_types, layer.in_dim, layer.out_types, layer.out_dim])?;
        let votes = self.capsule_votes(children, m, bias, &plan)?;
        let parents = self.route(votes, layer.routing_iters)?;
        let mut shape = vec![input.batch];
        shape.extend(&plan.out_spatial);
        shape.extend([layer.out_types, layer.out_dim]);
        let var = self.reshape(parents, &shape)?;
        Ok(CapsuleGrid {
            var,
            batch: input.batch,
            spatial: plan.out_spatial.clone(),
            types: layer.out_types,
            dim: layer.out_dim,
        })
    }

    /// Classic capsule layer: every child routes to every parent with a
    /// non-shared matrix. `weights: [n_children, d_in, J, d_out]`, where the
    /// children are the grid's capsules in (position, type) order.
    pub fn fully_connected_routing(
        &mut self,
        input: &CapsuleGrid,
        weights: Var,
        bias: Option<Var>,
        iterations: usize,
    ) -> Result<Var> {
        let n = input.positions() * input.types;
        let children = self.reshape(input.var, &[input.batch, n, input.dim])?;
        let votes = self.dense_votes(children, weights, bias)?;
        self.route(votes, iterations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(mode: CapsuleMode, k: usize, stride: usize, padding: usize) -> CapsuleLayerParams {
        CapsuleLayerParams {
            mode,
            kernel: vec![k, k],
            stride,
            padding,
            in_types: 1,
            in_dim: 2,
            out_types: 1,
            out_dim: 2,
            routing_iters: 1,
            bias: false,
        }
    }

    #[test]
    fn conv_plan_matches_conv_arithmetic() {
        let plan = WindowPlan::new(&layer(CapsuleMode::Conv, 5, 2, 2), &[64, 64]).unwrap();
        assert_eq!(plan.out_spatial, vec![32, 32]);
        assert_eq!(plan.slots, 25);
        // corner window keeps only the 3x3 in-bounds taps
        assert_eq!(plan.taps[..25].iter().filter(|t| t.is_some()).count(), 9);
    }

    #[test]
    fn deconv_single_child_reaches_each_output_once() {
        let plan = WindowPlan::new(&layer(CapsuleMode::Deconv, 2, 2, 0), &[1, 1]).unwrap();
        assert_eq!(plan.out_spatial, vec![2, 2]);
        assert_eq!(plan.slots, 1);
        let kernels: Vec<usize> = plan.taps.iter().map(|t| t.unwrap().kernel).collect();
        assert_eq!(kernels, vec![0, 1, 2, 3]);
        assert!(plan.taps.iter().all(|t| t.unwrap().child == 0));
    }

    #[test]
    fn deconv_shape_arithmetic() {
        let plan = WindowPlan::new(&layer(CapsuleMode::Deconv, 2, 2, 0), &[4, 4]).unwrap();
        assert_eq!(plan.out_spatial, vec![8, 8]);
        let padded = WindowPlan::new(&layer(CapsuleMode::Deconv, 4, 2, 1), &[4, 4]).unwrap();
        assert_eq!(padded.out_spatial, vec![8, 8]);
        assert_eq!(padded.slots, 4);
    }

    #[test]
    fn oversized_kernel_is_a_shape_error() {
        let err = WindowPlan::new(&layer(CapsuleMode::Conv, 5, 1, 0), &[3, 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }
}
