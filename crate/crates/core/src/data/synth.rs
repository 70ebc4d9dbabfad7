use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND: (f64, f64) = (0.1, 0.3);
const FOREGROUND: (f64, f64) = (0.6, 0.9);
const PIXEL_NOISE: f64 = 0.05;

fn check(size: usize, classes: usize) -> Result<()> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic size {size} is below 16")));
    }
    if !(2..=3).contains(&classes) {
        return Err(Error::Config(format!("synthetic data supports 2 or 3 classes, got {classes}")));
    }
    Ok(())
}

/// Label of a shape: with two classes every shape is foreground; with three,
/// round shapes are class 1 and boxes class 2.
fn label_for(round: bool, classes: usize) -> u8 {
    if classes == 2 || round {
        1
    } else {
        2
    }
}

/// Paints `label`/`value` into every voxel within `radius` of `center`.
pub fn draw_sphere(image: &mut [f64], mask: &mut [u8], spatial: &[usize], center: &[f64], radius: f64, label: u8, value: f64) {
    for_each_index(spatial, |flat, idx| {
        let d2: f64 = idx.iter().zip(center).map(|(&i, &c)| (i as f64 - c).powi(2)).sum();
        if d2 <= radius * radius {
            image[flat] = value;
            mask[flat] = label;
        }
    });
}

/// Paints the axis-aligned box `lo <= index < hi`.
pub fn draw_cuboid(image: &mut [f64], mask: &mut [u8], spatial: &[usize], lo: &[usize], hi: &[usize], label: u8, value: f64) {
    for_each_index(spatial, |flat, idx| {
        if idx.iter().zip(lo.iter().zip(hi)).all(|(&i, (&l, &h))| i >= l && i < h) {
            image[flat] = value;
            mask[flat] = label;
        }
    });
}

fn for_each_index(spatial: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = spatial.iter().product();
    let mut idx = vec![0usize; spatial.len()];
    for flat in 0..total {
        f(flat, &idx);
        for a in (0..spatial.len()).rev() {
            idx[a] += 1;
            if idx[a] < spatial[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn gen_sample(rng: &mut ChaCha8Rng, spatial: &[usize], classes: usize) -> SegSample {
    let pixels: usize = spatial.iter().product();
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let base = rng.random_range(BACKGROUND.0..BACKGROUND.1);
    let mut image = vec![base; pixels];
    let mut mask = vec![0u8; pixels];
    let size = spatial[0] as f64;
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let round = rng.random_bool(0.5);
        let value = rng.random_range(FOREGROUND.0..FOREGROUND.1);
        let label = label_for(round, classes);
        let half = rng.random_range(size / 10.0..size / 4.0);
        let center: Vec<f64> = spatial
            .iter()
            .map(|&s| rng.random_range(half..s as f64 - half))
            .collect();
        if round {
            draw_sphere(&mut image, &mut mask, spatial, &center, half, label, value);
        } else {
            // boxes get an independent half-extent per axis
            let halves: Vec<f64> = spatial.iter().map(|_| rng.random_range(0.6 * half..=half)).collect();
            let lo: Vec<usize> = center.iter().zip(&halves).map(|(c, h)| (c - h).round().max(0.0) as usize).collect();
            let hi: Vec<usize> = center
                .iter()
                .zip(&halves)
                .zip(spatial)
                .map(|((c, h), &s)| ((c + h).round() as usize).min(s))
                .collect();
            draw_cuboid(&mut image, &mut mask, spatial, &lo, &hi, label, value);
        }
    }
    for v in image.iter_mut() {
        // stored as f32 on disk, so keep values f32-representable
        *v = ((*v + noise.sample(rng)).clamp(0.0, 1.0) as f32) as f64;
    }
    let mut shape = vec![1];
    shape.extend(spatial);
    SegSample {
        image: Tensor::from_vec(&shape, image).unwrap(),
        mask,
    }
}

fn generate(seed: u64, count: usize, spatial: &[usize], classes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        samples: (0..count).map(|_| gen_sample(&mut rng, spatial, classes)).collect(),
        classes,
    }
}

/// Noisy single-channel `size × size` images with one to three discs and rectangles.
pub fn gen_shapes_2d(seed: u64, count: usize, size: usize, classes: usize) -> Result<Dataset> {
    check(size, classes)?;
    Ok(generate(seed, count, &[size, size], classes))
}

/// Noisy single-channel `size³` volumes with one to three spheres and cuboids.
pub fn gen_blobs_3d(seed: u64, count: usize, size: usize, classes: usize) -> Result<Dataset> {
    check(size, classes)?;
    Ok(generate(seed, count, &[size, size, size], classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(gen_shapes_2d(3, 5, 32, 3).unwrap(), gen_shapes_2d(3, 5, 32, 3).unwrap());
        assert_ne!(gen_shapes_2d(3, 5, 32, 3).unwrap(), gen_shapes_2d(4, 5, 32, 3).unwrap());
        assert_eq!(gen_blobs_3d(1, 2, 16, 2).unwrap(), gen_blobs_3d(1, 2, 16, 2).unwrap());
    }

    #[test]
    fn labels_and_intensities_in_range() {
        for classes in [2, 3] {
            let d = gen_shapes_2d(11, 20, 24, classes).unwrap();
            for s in &d.samples {
                assert!(s.mask.iter().all(|&l| (l as usize) < classes));
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            let v = gen_blobs_3d(11, 3, 16, classes).unwrap();
            assert!(v.samples.iter().all(|s| s.mask.iter().all(|&l| (l as usize) < classes)));
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(gen_shapes_2d(0, 1, 8, 2).is_err());
        assert!(gen_shapes_2d(0, 1, 32, 4).is_err());
    }

    #[test]
    fn interior_sphere_volume() {
        let spatial = [40, 40, 40];
        let n = 40 * 40 * 40;
        for r in [5.0, 8.0, 12.0] {
            let (mut img, mut mask) = (vec![0.0; n], vec![0u8; n]);
            draw_sphere(&mut img, &mut mask, &spatial, &[20.0, 19.5, 20.3], r, 1, 1.0);
            let count = mask.iter().filter(|&&l| l == 1).count() as f64;
            let expected = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            assert!((count - expected).abs() / expected < 0.1, "r={r}: {count} vs {expected}");
        }
    }
}
