//! Seeded inputs shared by the kernel benchmarks.

use capsnet::capsule::{CapsuleLayerParams, CapsuleMode};
use capsnet::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// A 5×5 strided capsule layer like the SegCaps encoder's.
pub fn encoder_layer(routing_iters: usize) -> CapsuleLayerParams {
    CapsuleLayerParams {
        mode: CapsuleMode::Conv,
        kernel: vec![5, 5],
        stride: 2,
        padding: 2,
        in_types: 2,
        in_dim: 8,
        out_types: 4,
        out_dim: 8,
        routing_iters,
        bias: false,
    }
}
