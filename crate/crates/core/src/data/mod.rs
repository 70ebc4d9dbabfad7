//! Synthetic segmentation data, SSL view transforms, rotations and volume I/O.

mod io;
mod rotate;
mod synth;
mod transform;

pub(crate) use io::Reader;
pub use io::{load_dataset, read_volume, save_dataset, write_volume, Volume, MANIFEST_NAME};
pub use rotate::{is_standard_angle, rotate_image, rotate_mask, rotate_volume, unrotate_mask, Axis, STANDARD_ANGLES};
pub use synth::{draw_cuboid, draw_sphere, gen_blobs_3d, gen_shapes_2d};
pub use transform::{apply_transform, ssl_transforms, TransformKind, BLUR_SIGMA, NOISE_STD};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image `[channels, spatial...]` with intensities in `[0, 1]` and its
/// label mask over the same spatial grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Vec<u8>) -> Result<SegSample> {
        let pixels: usize = image.shape()[1..].iter().product();
        if image.rank() < 3 || mask.len() != pixels {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} labels for image {:?}",
                mask.len(),
                image.shape()
            )));
        }
        Ok(SegSample { image, mask })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.image.shape()[1..]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.mask.iter().map(|&l| l as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seeded shuffle, then the first `train_fraction` of samples train and the rest validate.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let pick = |idx: &[usize]| Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes,
        };
        (pick(&order[..cut]), pick(&order[cut..]))
    }

    /// Seeded assignment of samples to `k` folds; returns (train, held-out) for `fold`.
    pub fn fold(&self, k: usize, fold: usize, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % k == fold {
                held.push(self.samples[i].clone());
            } else {
                train.push(self.samples[i].clone());
            }
        }
        (
            Dataset { samples: train, classes: self.classes },
            Dataset { samples: held, classes: self.classes },
        )
    }
}
