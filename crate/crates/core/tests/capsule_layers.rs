use capsnet::autodiff::Graph;
use capsnet::capsule::{dynamic_routing, CapsuleGrid, CapsuleLayerParams, CapsuleMode};
use capsnet::gradcheck::{gradcheck, Coverage};
use capsnet::optim::NamedTensors;
use capsnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|x| x * n2.sqrt() / (1.0 + n2)).collect()
}

/// Plain routing over explicit vote vectors `votes[i][p]`.
fn route(votes: &[Vec<Vec<f64>>], iters: usize) -> Vec<Vec<f64>> {
    let (n, j, d) = (votes.len(), votes[0].len(), votes[0][0].len());
    let mut b = vec![vec![0.0f64; j]; n];
    let mut v = vec![vec![0.0; d]; j];
    for _ in 0..iters {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                row.iter().map(|x| x.exp() / z).collect()
            })
            .collect();
        for p in 0..j {
            let s: Vec<f64> = (0..d).map(|e| (0..n).map(|i| c[i][p] * votes[i][p][e]).sum()).collect();
            v[p] = squash(&s);
        }
        for i in 0..n {
            for p in 0..j {
                b[i][p] += (0..d).map(|e| votes[i][p][e] * v[p][e]).sum::<f64>();
            }
        }
    }
    v
}

struct Case {
    layer: CapsuleLayerParams,
    h: usize,
    w: usize,
    x: Vec<f64>,
    m: Vec<f64>,
    b: Option<Vec<f64>>,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng, mode: CapsuleMode, kernel: usize, stride: usize, padding: usize, bias: bool) -> Case {
        let (cin, din, cout, dout) = (2, 3, 2, 2);
        let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
        let layer = CapsuleLayerParams {
            mode,
            kernel: vec![kernel, kernel],
            stride,
            padding,
            in_types: cin,
            in_dim: din,
            out_types: cout,
            out_dim: dout,
            routing_iters: 3,
            bias,
        };
        let x = normals(rng, h * w * cin * din);
        let m = normals(rng, layer.transform_shape().iter().product());
        let b = bias.then(|| normals(rng, cout * dout));
        Case { layer, h, w, x, m, b }
    }

    fn run(&self, x: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let l = &self.layer;
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(&[1, self.h, self.w, l.in_types, l.in_dim], x.to_vec()).unwrap());
        let grid = CapsuleGrid::from_var(&g, xv).unwrap();
        let m = g.constant(Tensor::from_vec(&l.transform_shape(), self.m.clone()).unwrap());
        let b = self.b.as_ref().map(|b| g.constant(Tensor::from_vec(&l.bias_shape(), b.clone()).unwrap()));
        let out = g.capsule_layer(&grid, l, m, b).unwrap();
        (out.spatial.clone(), g.value(out.var).data().to_vec())
    }

    /// Votes of child (y, x) through kernel tap (ky, kx), one per (type, parent).
    fn votes(&self, y: usize, x: usize, ky: usize, kx: usize) -> Vec<Vec<Vec<f64>>> {
        let l = &self.layer;
        let k = l.kernel[1];
        let (cin, din, cout, dout) = (l.in_types, l.in_dim, l.out_types, l.out_dim);
        (0..cin)
            .map(|ci| {
                let u = &self.x[((y * self.w + x) * cin + ci) * din..][..din];
                (0..cout)
                    .map(|p| {
                        (0..dout)
                            .map(|e| {
                                let mut acc = self.b.as_ref().map_or(0.0, |b| b[p * dout + e]);
                                for (a, &ua) in u.iter().enumerate() {
                                    acc += ua * self.m[((((ky * k + kx) * cin + ci) * din + a) * cout + p) * dout + e];
                                }
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Children feeding output (oy, ox), found by direct coordinate arithmetic.
    fn oracle(&self, oy: usize, ox: usize) -> Vec<Vec<f64>> {
        let l = &self.layer;
        let (k, s, p) = (l.kernel[0] as isize, l.stride as isize, l.padding as isize);
        let mut votes = Vec::new();
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let (ky, kx) = match l.mode {
                    CapsuleMode::Conv => (y + p - oy as isize * s, x + p - ox as isize * s),
                    CapsuleMode::Deconv => (oy as isize + p - y * s, ox as isize + p - x * s),
                };
                if (0..k).contains(&ky) && (0..k).contains(&kx) {
                    votes.extend(self.votes(y as usize, x as usize, ky as usize, kx as usize));
                }
            }
        }
        route(&votes, l.routing_iters)
    }
}

fn check_against_oracle(case: &Case) {
    let (spatial, got) = case.run(&case.x);
    let (cout, dout) = (case.layer.out_types, case.layer.out_dim);
    for oy in 0..spatial[0] {
        for ox in 0..spatial[1] {
            let want = case.oracle(oy, ox);
            for p in 0..cout {
                for e in 0..dout {
                    let g = got[((oy * spatial[1] + ox) * cout + p) * dout + e];
                    assert!((g - want[p][e]).abs() < 1e-12, "({oy},{ox}) parent {p}: {g} vs {}", want[p][e]);
                }
            }
        }
    }
}

#[test]
fn conv_layer_matches_direct_window_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (kernel, stride, padding, bias) in [(3, 1, 1, false), (3, 2, 1, true), (2, 1, 0, true), (1, 1, 0, false)] {
        check_against_oracle(&Case::random(&mut rng, CapsuleMode::Conv, kernel, stride, padding, bias));
    }
}

#[test]
fn deconv_layer_matches_direct_scatter_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (kernel, stride, padding, bias) in [(2, 2, 0, false), (3, 2, 1, true), (4, 2, 1, false), (3, 1, 1, true)] {
        check_against_oracle(&Case::random(&mut rng, CapsuleMode::Deconv, kernel, stride, padding, bias));
    }
}

#[test]
fn shifting_by_the_stride_shifts_the_output_by_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for stride in [1, 2] {
        let mut case = Case::random(&mut rng, CapsuleMode::Conv, 3, stride, 1, false);
        case.w = 8;
        case.x = normals(&mut rng, case.h * case.w * 6);
        let (spatial, base) = case.run(&case.x);
        // move every row `stride` columns to the right, filling with zero capsules
        let mut shifted = vec![0.0; case.x.len()];
        for y in 0..case.h {
            for x in stride..case.w {
                let (dst, src) = ((y * case.w + x) * 6, (y * case.w + x - stride) * 6);
                shifted[dst..dst + 6].copy_from_slice(&case.x[src..src + 6]);
            }
        }
        let (_, moved) = case.run(&shifted);
        let block = 4;
        for oy in 0..spatial[0] {
            // windows that stay inside the unshifted content
            for ox in 0..spatial[1] - 1 {
                if (ox + 1) * stride + 1 >= case.w {
                    continue;
                }
                let a = &base[(oy * spatial[1] + ox) * block..][..block];
                let b = &moved[(oy * spatial[1] + ox + 1) * block..][..block];
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-12, "stride {stride} at ({oy},{ox})");
                }
            }
        }
    }
}

#[test]
fn routing_is_equivariant_to_child_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, j, d) = (7, 3, 4);
    let votes = normals(&mut rng, n * j * d);
    let mut order: Vec<usize> = (0..n).collect();
    order.reverse();
    order.swap(0, 3);
    let permuted: Vec<f64> = order.iter().flat_map(|&i| votes[i * j * d..][..j * d].to_vec()).collect();
    let a = dynamic_routing(&Tensor::from_vec(&[n, j, d], votes).unwrap(), 3, None).unwrap();
    let b = dynamic_routing(&Tensor::from_vec(&[n, j, d], permuted).unwrap(), 3, None).unwrap();
    assert!(a.parents.max_abs_diff(&b.parents) < 1e-12);
    for (row, &i) in order.iter().enumerate() {
        for p in 0..j {
            let diff = b.coupling.at(&[row, p]) - a.coupling.at(&[i, p]);
            assert!(diff.abs() < 1e-12);
        }
    }
}

#[test]
fn outlier_loses_coupling_to_the_consensus_parent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, j, d) = (6, 2, 4);
    let consensus = [0.8, -0.4, 0.6, 0.2];
    let mut votes = normals(&mut rng, n * j * d).iter().map(|x| x * 0.1).collect::<Vec<_>>();
    for i in 0..n {
        let sign = if i == n - 1 { -1.0 } else { 1.0 };
        for e in 0..d {
            votes[(i * j) * d + e] = sign * consensus[e];
        }
    }
    let out = dynamic_routing(&Tensor::from_vec(&[n, j, d], votes).unwrap(), 3, None).unwrap();
    let outlier = out.coupling.at(&[n - 1, 0]);
    for i in 0..n - 1 {
        let inlier = out.coupling.at(&[i, 0]);
        assert!(inlier > 0.5 && outlier < 0.5 && inlier > outlier, "inlier {inlier} outlier {outlier}");
    }
}

#[test]
fn routing_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for iters in [1, 2, 3] {
        let (g_, n, j, d) = (2, 4, 3, 3);
        let mut params = NamedTensors::new();
        params.insert("votes".into(), Tensor::from_vec(&[g_, n, j, d], normals(&mut rng, g_ * n * j * d)).unwrap());
        let probe = Tensor::from_vec(&[g_, j, d], normals(&mut rng, g_ * j * d)).unwrap();
        let f = |g: &mut Graph, p: &indexmap::IndexMap<String, capsnet::autodiff::Var>| {
            let v = g.route(p["votes"], iters)?;
            let w = g.constant(probe.clone());
            let prod = g.mul(v, w);
            Ok(g.sum(prod))
        };
        let report = gradcheck(f, &params, 1e-6, 1e-6, Coverage::All).unwrap();
        assert!(report.passed(), "{iters} iterations:\n{report}");
    }
}

#[test]
fn capsule_layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (mode, kernel, stride, padding) in [(CapsuleMode::Conv, 3, 2, 1), (CapsuleMode::Deconv, 2, 2, 0)] {
        let case = Case::random(&mut rng, mode, kernel, stride, padding, true);
        let l = case.layer.clone();
        let mut params = NamedTensors::new();
        params.insert("x".into(), Tensor::from_vec(&[1, case.h, case.w, l.in_types, l.in_dim], case.x.clone()).unwrap());
        params.insert("m".into(), Tensor::from_vec(&l.transform_shape(), case.m.iter().map(|v| v * 0.5).collect()).unwrap());
        params.insert("b".into(), Tensor::from_vec(&l.bias_shape(), case.b.clone().unwrap()).unwrap());
        let (spatial, _) = case.run(&case.x);
        let n_out = spatial.iter().product::<usize>() * l.out_types * l.out_dim;
        let mut shape = vec![1];
        shape.extend(&spatial);
        shape.extend([l.out_types, l.out_dim]);
        let probe = Tensor::from_vec(&shape, normals(&mut rng, n_out)).unwrap();
        let f = |g: &mut Graph, p: &indexmap::IndexMap<String, capsnet::autodiff::Var>| {
            let grid = CapsuleGrid::from_var(g, p["x"])?;
            let out = g.capsule_layer(&grid, &l, p["m"], Some(p["b"]))?;
            let w = g.constant(probe.clone());
            let prod = g.mul(out.var, w);
            Ok(g.sum(prod))
        };
        let report = gradcheck(f, &params, 1e-6, 1e-5, Coverage::All).unwrap();
        assert!(report.passed(), "{mode:?}:\n{report}");
    }
}

#[test]
fn three_dimensional_layer_has_expected_shape_and_unit_bounded_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layer = CapsuleLayerParams {
        mode: CapsuleMode::Conv,
        kernel: vec![3, 3, 3],
        stride: 2,
        padding: 1,
        in_types: 2,
        in_dim: 4,
        out_types: 3,
        out_dim: 4,
        routing_iters: 3,
        bias: false,
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[2, 5, 4, 6, 2, 4], normals(&mut rng, 2 * 5 * 4 * 6 * 8)).unwrap());
    let grid = CapsuleGrid::from_var(&g, x).unwrap();
    let m = g.constant(Tensor::from_vec(&layer.transform_shape(), normals(&mut rng, 27 * 2 * 4 * 3 * 4)).unwrap());
    let out = g.capsule_layer(&grid, &layer, m, None).unwrap();
    assert_eq!(out.shape(), vec![2, 3, 2, 3, 3, 4]);
    let lengths = g.capsule_lengths(&out);
    assert!(g.value(lengths).data().iter().all(|&l| (0.0..1.0).contains(&l)));
}
