use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

pub const BLUR_SIGMA: f64 = 1.0;
pub const NOISE_STD: f64 = 0.05;

/// View transformation for the pretext task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TransformKind {
    Identity,
    /// Zeroes one channel (0 = R, 1 = G, 2 = B).
    ZeroChannel(usize),
    /// Swaps two disjoint pairs of quarter-extent patches.
    SwapPatches { seed: u64 },
    /// Separable Gaussian blur, truncated at radius `2σ`.
    Blur { sigma: f64 },
    /// Additive Gaussian noise, clamped to `[0, 1]`.
    Noise { std: f64, seed: u64 },
}

impl TransformKind {
    /// Same transform with its random draw replaced by `seed`.
    pub fn reseed(self, seed: u64) -> TransformKind {
        match self {
            TransformKind::SwapPatches { .. } => TransformKind::SwapPatches { seed },
            TransformKind::Noise { std, .. } => TransformKind::Noise { std, seed },
            other => other,
        }
    }
}

/// The pretext transform set for images with `channels` channels: identity,
/// the three channel zeroings (only with three or more channels), patch
/// swapping, blur and noise.
pub fn ssl_transforms(channels: usize) -> Vec<TransformKind> {
    let mut set = vec![TransformKind::Identity];
    if channels >= 3 {
        set.extend((0..3).map(TransformKind::ZeroChannel));
    }
    set.extend([
        TransformKind::SwapPatches { seed: 0 },
        TransformKind::Blur { sigma: BLUR_SIGMA },
        TransformKind::Noise { std: NOISE_STD, seed: 0 },
    ]);
    set
}

pub fn apply_transform(image: &Tensor, kind: TransformKind) -> Result<Tensor> {
    let channels = image.shape()[0];
    match kind {
        TransformKind::Identity => Ok(image.clone()),
        TransformKind::ZeroChannel(c) => {
            if channels < 3 || c >= channels {
                return Err(Error::Unsupported(format!(
                    "zero_channel({c}) needs at least 3 channels, image has {channels}"
                )));
            }
            let mut out = image.clone();
            let per = image.numel() / channels;
            out.data_mut()[c * per..(c + 1) * per].fill(0.0);
            Ok(out)
        }
        TransformKind::SwapPatches { seed } => swap_patches(image, seed),
        TransformKind::Blur { sigma } => Ok(blur(image, sigma)),
        TransformKind::Noise { std, seed } => {
            let dist = Normal::new(0.0, std).map_err(|e| Error::Contract(format!("noise std {std}: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
            }
            Ok(out)
        }
    }
}

/// Patches tile the grid in quarters along each axis; four distinct tiles
/// are drawn and swapped as two pairs, so the same seed undoes itself.
fn swap_patches(image: &Tensor, seed: u64) -> Result<Tensor> {
    let shape = image.shape();
    let spatial = &shape[1..];
    if spatial.iter().any(|&s| s < 4) {
        return Err(Error::shape(shape, "patch swapping needs every spatial extent >= 4"));
    }
    let patch: Vec<usize> = spatial.iter().map(|s| s / 4).collect();
    let tiles = 4usize.pow(spatial.len() as u32);
    let mut order: Vec<usize> = (0..tiles).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let origin = |tile: usize| -> Vec<usize> {
        let mut t = tile;
        let mut o = vec![0; spatial.len()];
        for a in (0..spatial.len()).rev() {
            o[a] = (t % 4) * patch[a];
            t /= 4;
        }
        o
    };
    let strides = strides_of(shape);
    let mut out = image.clone();
    let patch_len: usize = patch.iter().product();
    for pair in [(order[0], order[1]), (order[2], order[3])] {
        let (a, b) = (origin(pair.0), origin(pair.1));
        for c in 0..shape[0] {
            for k in 0..patch_len {
                let mut rem = k;
                let (mut fa, mut fb) = (c * strides[0], c * strides[0]);
                for ax in (0..spatial.len()).rev() {
                    let i = rem % patch[ax];
                    rem /= patch[ax];
                    fa += (a[ax] + i) * strides[ax + 1];
                    fb += (b[ax] + i) * strides[ax + 1];
                }
                out.data_mut().swap(fa, fb);
            }
        }
    }
    Ok(out)
}

fn blur(image: &Tensor, sigma: f64) -> Tensor {
    let radius = (2.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let shape = image.shape().to_vec();
    let strides = strides_of(&shape);
    let mut cur = image.clone();
    for axis in 1..shape.len() {
        let (len, stride) = (shape[axis] as isize, strides[axis]);
        let src = cur.clone();
        let dst = cur.data_mut();
        for (flat, out) in dst.iter_mut().enumerate() {
            let pos = ((flat / stride) % shape[axis]) as isize;
            let (mut acc, mut norm) = (0.0, 0.0);
            for (w, d) in weights.iter().zip(-radius..=radius) {
                let q = pos + d;
                if q < 0 || q >= len {
                    continue;
                }
                acc += w * src.data()[(flat as isize + d * stride as isize) as usize];
                norm += w;
            }
            // renormalised over in-bounds taps so flat regions stay flat
            *out = acc / norm;
        }
    }
    cur
}
