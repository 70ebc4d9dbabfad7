//! Dynamic routing by agreement.
//!
//! For one routing group with `n` children, `j` parents and capsule
//! dimension `d`, starting from priors `b`:
//!
//! ```text
//! repeat K times:
//!     c[i, :] = softmax(b[i, :])          over parent types
//!     s[p]    = Σ_i c[i, p] · û[i, p]
//!     v[p]    = squash(s[p])
//!     b[i, p] += û[i, p] · v[p]
//! ```
//!
//! The graph op differentiates through every iteration; the reverse sweep
//! replays the stored couplings and parent states.

use rayon::prelude::*;

use super::squash::{squash_into, squash_vjp};
use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sizes of one routing group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteDims {
    pub children: usize,
    pub parents: usize,
    pub dim: usize,
}

/// Per-iteration record of one routing group.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace {
    /// `couplings[t]`: `[children, parents]` used at iteration `t`.
    pub couplings: Vec<Vec<f64>>,
    /// `pre_squash[t]`: `[parents, dim]`.
    pub pre_squash: Vec<Vec<f64>>,
    /// `parents[t]`: `[parents, dim]`, squashed.
    pub parents: Vec<Vec<f64>>,
    /// Priors after the last agreement update, `[children, parents]`.
    pub final_priors: Vec<f64>,
}

fn softmax_rows(b: &[f64], parents: usize, out: &mut [f64]) {
    for (row, dst) in b.chunks(parents).zip(out.chunks_mut(parents)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &x) in dst.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
}

/// Runs `iterations` rounds over `votes: [children, parents, dim]`.
pub fn route_group(votes: &[f64], dims: RouteDims, iterations: usize, priors: &[f64]) -> RoutingTrace {
    let RouteDims { children: n, parents: j, dim: d } = dims;
    debug_assert_eq!(votes.len(), n * j * d);
    debug_assert_eq!(priors.len(), n * j);
    let mut b = priors.to_vec();
    let mut trace = RoutingTrace::default();
    for _ in 0..iterations {
        let mut c = vec![0.0; n * j];
        softmax_rows(&b, j, &mut c);
        let mut s = vec![0.0; j * d];
        for i in 0..n {
            for p in 0..j {
                let cij = c[i * j + p];
                let vote = &votes[(i * j + p) * d..][..d];
                for (acc, &u) in s[p * d..][..d].iter_mut().zip(vote) {
                    *acc += cij * u;
                }
            }
        }
        let mut v = vec![0.0; j * d];
        for p in 0..j {
            squash_into(&s[p * d..][..d], &mut v[p * d..][..d]);
        }
        for i in 0..n {
            for p in 0..j {
                let vote = &votes[(i * j + p) * d..][..d];
                let agreement: f64 = vote.iter().zip(&v[p * d..][..d]).map(|(a, b)| a * b).sum();
                b[i * j + p] += agreement;
            }
        }
        trace.couplings.push(c);
        trace.pre_squash.push(s);
        trace.parents.push(v);
    }
    trace.final_priors = b;
    trace
}

/// Reverse sweep through `route_group`. Returns the gradient w.r.t. the votes
/// given the gradient `grad_out` of the final parents.
pub fn route_group_backward(votes: &[f64], dims: RouteDims, trace: &RoutingTrace, grad_out: &[f64]) -> Vec<f64> {
    let RouteDims { children: n, parents: j, dim: d } = dims;
    let iterations = trace.parents.len();
    let mut g_votes = vec![0.0; n * j * d];
    // gradient w.r.t. the priors entering the current iteration
    let mut g_b = vec![0.0; n * j];
    let mut g_v = grad_out.to_vec();
    for t in (0..iterations).rev() {
        let c = &trace.couplings[t];
        let s = &trace.pre_squash[t];
        let mut g_s = vec![0.0; j * d];
        for p in 0..j {
            squash_vjp(&s[p * d..][..d], &g_v[p * d..][..d], &mut g_s[p * d..][..d]);
        }
        // s = Σ c·û
        for i in 0..n {
            let row = i * j;
            let mut g_c = vec![0.0; j];
            for p in 0..j {
                let vote = &votes[(row + p) * d..][..d];
                let gs = &g_s[p * d..][..d];
                let cij = c[row + p];
                let gv = &mut g_votes[(row + p) * d..][..d];
                let mut dot = 0.0;
                for k in 0..d {
                    gv[k] += cij * gs[k];
                    dot += vote[k] * gs[k];
                }
                g_c[p] = dot;
            }
            // c = softmax(b) per child
            let weighted: f64 = (0..j).map(|p| c[row + p] * g_c[p]).sum();
            for p in 0..j {
                g_b[row + p] += c[row + p] * (g_c[p] - weighted);
            }
        }
        if t == 0 {
            break;
        }
        // b_t = b_{t-1} + û·v_{t-1}
        let v_prev = &trace.parents[t - 1];
        let mut g_v_prev = vec![0.0; j * d];
        for i in 0..n {
            for p in 0..j {
                let gb = g_b[i * j + p];
                if gb == 0.0 {
                    continue;
                }
                let vote = &votes[(i * j + p) * d..][..d];
                let gv = &mut g_votes[(i * j + p) * d..][..d];
                let vp = &v_prev[p * d..][..d];
                let acc = &mut g_v_prev[p * d..][..d];
                for k in 0..d {
                    gv[k] += gb * vp[k];
                    acc[k] += gb * vote[k];
                }
            }
        }
        g_v = g_v_prev;
    }
    g_votes
}

/// Result of [`dynamic_routing`] on a single group.
#[derive(Clone, Debug)]
pub struct RoutingOutput {
    /// `[parents, dim]`.
    pub parents: Tensor,
    /// Couplings of the last iteration, `[children, parents]`.
    pub coupling: Tensor,
    /// Priors after the last agreement update, `[children, parents]`.
    pub priors: Tensor,
    pub trace: RoutingTrace,
}

/// Routes `votes: [children, parents, dim]` for `iterations` rounds from
/// priors `b0` (zeros when `None`).
pub fn dynamic_routing(votes: &Tensor, iterations: usize, b0: Option<&Tensor>) -> Result<RoutingOutput> {
    if iterations == 0 {
        return Err(Error::Contract("routing needs at least one iteration".into()));
    }
    let [n, j, d]: [usize; 3] = votes
        .shape()
        .try_into()
        .map_err(|_| Error::ShapeMismatch(format!("votes must be [children, parents, dim], got {:?}", votes.shape())))?;
    let zeros;
    let priors = match b0 {
        Some(b) => {
            if b.shape() != [n, j] {
                return Err(Error::ShapeMismatch(format!(
                    "priors {:?} for votes {:?}",
                    b.shape(),
                    votes.shape()
                )));
            }
            b.data()
        }
        None => {
            zeros = vec![0.0; n * j];
            &zeros
        }
    };
    let dims = RouteDims { children: n, parents: j, dim: d };
    let trace = route_group(votes.data(), dims, iterations, priors);
    Ok(RoutingOutput {
        parents: Tensor::from_vec(&[j, d], trace.parents.last().unwrap().clone())?,
        coupling: Tensor::from_vec(&[n, j], trace.couplings.last().unwrap().clone())?,
        priors: Tensor::from_vec(&[n, j], trace.final_priors.clone())?,
        trace,
    })
}

impl Graph {
    /// Routes every group of `votes: [groups, children, parents, dim]` with
    /// zero initial priors, returning squashed parents `[groups, parents, dim]`.
    pub fn route(&mut self, votes: Var, iterations: usize) -> Result<Var> {
        if iterations == 0 {
            return Err(Error::Contract("routing needs at least one iteration".into()));
        }
        let [groups, n, j, d]: [usize; 4] = self
            .shape(votes)
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("votes must be rank 4, got {:?}", self.shape(votes))))?;
        let dims = RouteDims { children: n, parents: j, dim: d };
        let group_len = n * j * d;
        let priors = vec![0.0; n * j];
        let traces: Vec<RoutingTrace> = self
            .value(votes)
            .data()
            .par_chunks(group_len)
            .map(|chunk| route_group(chunk, dims, iterations, &priors))
            .collect();
        let mut out = Vec::with_capacity(groups * j * d);
        for t in &traces {
            out.extend_from_slice(t.parents.last().unwrap());
        }
        let value = Tensor::from_vec(&[groups, j, d], out)?;
        Ok(self.record(
            value,
            vec![votes],
            Box::new(move |ctx: &BackwardCtx| {
                let mut g = vec![0.0; groups * group_len];
                g.par_chunks_mut(group_len)
                    .zip(ctx.input(0).data().par_chunks(group_len))
                    .zip(ctx.grad.data().par_chunks(j * d))
                    .zip(traces.par_iter())
                    .for_each(|(((dst, votes), grad), trace)| {
                        let gv = route_group_backward(votes, dims, trace, grad);
                        dst.copy_from_slice(&gv);
                    });
                vec![Some(Tensor::from_vec(ctx.input(0).shape(), g).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::squash::squash_values;
    use crate::tensor::Init;

    #[test]
    fn single_iteration_is_squashed_uniform_sum() {
        let votes = Tensor::create(&[4, 3, 2], Init::Normal { seed: 9, mean: 0.0, std: 1.0 }).unwrap();
        let out = dynamic_routing(&votes, 1, None).unwrap();
        let mut s = Tensor::zeros(&[3, 2]);
        for i in 0..4 {
            for p in 0..3 {
                for k in 0..2 {
                    let cur = s.at(&[p, k]);
                    s.set(&[p, k], cur + votes.at(&[i, p, k]) / 3.0);
                }
            }
        }
        assert!(out.parents.max_abs_diff(&squash_values(&s)) < 1e-12);
        assert!(out.coupling.data().iter().all(|&c| (c - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_iterations_rejected() {
        let votes = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(dynamic_routing(&votes, 0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_children_keep_identical_couplings() {
        let one = Tensor::create(&[1, 2, 3], Init::Normal { seed: 4, mean: 0.0, std: 1.0 }).unwrap();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(one.data());
        }
        let votes = Tensor::from_vec(&[5, 2, 3], data).unwrap();
        for k in 1..=4 {
            let out = dynamic_routing(&votes, k, None).unwrap();
            for c in &out.trace.couplings {
                for i in 1..5 {
                    assert_eq!(&c[i * 2..i * 2 + 2], &c[0..2]);
                }
            }
        }
    }
}
