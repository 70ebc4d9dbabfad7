use std::hint::black_box;

use capsnet::autodiff::{ConvGeometry, Graph};
use capsnet::capsule::{dynamic_routing, CapsuleGrid};
use capsnet_bench::{encoder_layer, normal_tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_nd");
    for size in [32, 64] {
        let x = normal_tensor(&[1, 16, size, size], 1);
        let w = normal_tensor(&[16, 16, 3, 3], 2);
        let geom = ConvGeometry::same(2, 3, 1);
        group.bench_with_input(BenchmarkId::new("forward_backward", size), &size, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let wv = g.leaf(w.clone(), true);
                let y = g.conv_nd(xv, wv, &geom).unwrap();
                let loss = g.sum(y);
                g.backward(loss).unwrap();
                black_box(g.grad(wv).unwrap().sum())
            })
        });
    }
    group.finish();
}

fn capsule_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("capsule_layer");
    for iters in [1, 3] {
        let layer = encoder_layer(iters);
        let x = normal_tensor(&[1, 32, 32, 2, 8], 3);
        let m = normal_tensor(&layer.transform_shape(), 4);
        group.bench_with_input(BenchmarkId::new("forward_backward", iters), &iters, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let mv = g.leaf(m.clone(), true);
                let grid = CapsuleGrid::from_var(&g, xv).unwrap();
                let out = g.capsule_layer(&grid, &layer, mv, None).unwrap();
                let loss = g.sum(out.var);
                g.backward(loss).unwrap();
                black_box(g.grad(mv).unwrap().sum())
            })
        });
    }
    group.finish();
}

fn routing(c: &mut Criterion) {
    let votes = normal_tensor(&[50, 4, 16], 5);
    let mut group = c.benchmark_group("dynamic_routing");
    for iters in [1, 3, 5] {
        group.bench_with_input(BenchmarkId::from_parameter(iters), &iters, |b, &k| {
            b.iter(|| black_box(dynamic_routing(&votes, k, None).unwrap().parents))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, capsule_layer, routing);
criterion_main!(benches);
