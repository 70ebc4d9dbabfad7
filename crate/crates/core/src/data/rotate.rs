use std::fmt;
use std::str::FromStr;

use super::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STANDARD_ANGLES: [f64; 7] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0];

pub fn is_standard_angle(angle: f64) -> bool {
    STANDARD_ANGLES.contains(&angle)
}

/// Rotation axis over spatial axes `(x, y, z)` = `(0, 1, 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
    All,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
            Axis::All => "all",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Axis> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            "all" => Ok(Axis::All),
            _ => Err(Error::Config(format!("unknown rotation axis {s:?}"))),
        }
    }
}

/// Single-axis steps making up a rotation: "all" is x, then y, then z.
fn steps(axis: Axis, angle: f64) -> Vec<(usize, f64)> {
    match axis {
        Axis::X => vec![(0, angle)],
        Axis::Y => vec![(1, angle)],
        Axis::Z => vec![(2, angle)],
        Axis::All => vec![(0, angle), (1, angle), (2, angle)],
    }
}

fn cos_sin(angle: f64) -> (f64, f64) {
    // exact values at right angles keep 90° rotations exact permutations
    let quarter = angle / 90.0;
    if quarter == quarter.round() {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = angle.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotation plane `(a, b)` for a rotation about spatial axis `about`.
fn plane(about: usize) -> (usize, usize) {
    match about {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    }
}

/// For every output voxel, the source coordinate under a rotation by
/// `angle` about `about` (inverse mapping about the grid centre).
fn source_coords(spatial: &[usize; 3], about: usize, angle: f64) -> Vec<[f64; 3]> {
    let (c, s) = cos_sin(angle);
    let (a, b) = plane(about);
    let centre: Vec<f64> = spatial.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
    let mut out = Vec::with_capacity(spatial.iter().product());
    for i in 0..spatial[0] {
        for j in 0..spatial[1] {
            for k in 0..spatial[2] {
                let p = [i as f64, j as f64, k as f64];
                let (da, db) = (p[a] - centre[a], p[b] - centre[b]);
                let mut q = p;
                q[a] = centre[a] + c * da + s * db;
                q[b] = centre[b] - s * da + c * db;
                out.push(q);
            }
        }
    }
    out
}

fn spatial3(shape: &[usize]) -> Result<[usize; 3]> {
    shape
        .try_into()
        .map_err(|_| Error::Unsupported(format!("rotation needs a 3D grid, got spatial {shape:?}")))
}

fn rotate_channel_linear(src: &[f64], spatial: &[usize; 3], about: usize, angle: f64) -> Vec<f64> {
    let [nx, ny, nz] = *spatial;
    let at = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            0.0
        } else {
            src[(i as usize * ny + j as usize) * nz + k as usize]
        }
    };
    source_coords(spatial, about, angle)
        .into_iter()
        .map(|q| {
            let base = q.map(|v| v.floor());
            let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
            let b = base.map(|v| v as isize);
            let mut acc = 0.0;
            for corner in 0..8 {
                let o = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
                let mut w = 1.0;
                for ax in 0..3 {
                    w *= if o[ax] == 1 { frac[ax] } else { 1.0 - frac[ax] };
                }
                if w != 0.0 {
                    acc += w * at(b[0] + o[0] as isize, b[1] + o[1] as isize, b[2] + o[2] as isize);
                }
            }
            acc
        })
        .collect()
}

fn rotate_labels_nearest(src: &[u8], spatial: &[usize; 3], about: usize, angle: f64) -> Vec<u8> {
    let [_, ny, nz] = *spatial;
    source_coords(spatial, about, angle)
        .into_iter()
        .map(|q| {
            let r = q.map(|v| v.round());
            if r.iter().zip(spatial).any(|(&v, &n)| v < 0.0 || v >= n as f64) {
                0
            } else {
                src[(r[0] as usize * ny + r[1] as usize) * nz + r[2] as usize]
            }
        })
        .collect()
}

/// Trilinear rotation of every channel of `image: [C, x, y, z]`; zeros fill
/// regions rotated in from outside the grid.
pub fn rotate_image(image: &Tensor, angle: f64, axis: Axis) -> Result<Tensor> {
    let spatial = spatial3(&image.shape()[1..])?;
    if angle == 0.0 {
        return Ok(image.clone());
    }
    let per: usize = spatial.iter().product();
    let mut data = image.data().to_vec();
    for (about, a) in steps(axis, angle) {
        data = data
            .chunks(per)
            .flat_map(|ch| rotate_channel_linear(ch, &spatial, about, a))
            .collect();
    }
    Tensor::from_vec(image.shape(), data)
}

/// Nearest-neighbour rotation of a label grid.
pub fn rotate_mask(mask: &[u8], spatial: &[usize], angle: f64, axis: Axis) -> Result<Vec<u8>> {
    let spatial = spatial3(spatial)?;
    let mut out = mask.to_vec();
    if angle == 0.0 {
        return Ok(out);
    }
    for (about, a) in steps(axis, angle) {
        out = rotate_labels_nearest(&out, &spatial, about, a);
    }
    Ok(out)
}

/// Inverse of [`rotate_mask`]: undoes the steps in reverse order.
pub fn unrotate_mask(mask: &[u8], spatial: &[usize], angle: f64, axis: Axis) -> Result<Vec<u8>> {
    let spatial = spatial3(spatial)?;
    let mut out = mask.to_vec();
    if angle == 0.0 {
        return Ok(out);
    }
    for (about, a) in steps(axis, angle).into_iter().rev() {
        out = rotate_labels_nearest(&out, &spatial, about, -a);
    }
    Ok(out)
}

pub fn rotate_volume(sample: &SegSample, angle: f64, axis: Axis) -> Result<SegSample> {
    Ok(SegSample {
        image: rotate_image(&sample.image, angle, axis)?,
        mask: rotate_mask(&sample.mask, sample.spatial(), angle, axis)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{draw_cuboid, gen_blobs_3d};
    use crate::metrics::seg_metrics;

    #[test]
    fn zero_angle_is_identity() {
        let d = gen_blobs_3d(2, 1, 16, 3).unwrap();
        for axis in [Axis::X, Axis::Y, Axis::Z, Axis::All] {
            assert_eq!(rotate_volume(&d.samples[0], 0.0, axis).unwrap(), d.samples[0]);
        }
    }

    #[test]
    fn right_angle_preserves_cuboid_voxels() {
        let spatial = [12, 12, 12];
        let (mut img, mut mask) = (vec![0.0; 1728], vec![0u8; 1728]);
        draw_cuboid(&mut img, &mut mask, &spatial, &[2, 3, 1], &[7, 10, 11], 1, 1.0);
        for axis in [Axis::X, Axis::Y, Axis::Z, Axis::All] {
            let r = rotate_mask(&mask, &spatial, 90.0, axis).unwrap();
            assert_eq!(r.iter().filter(|&&l| l == 1).count(), 5 * 7 * 10);
            assert_ne!(r, mask);
            assert_eq!(unrotate_mask(&r, &spatial, 90.0, axis).unwrap(), mask);
        }
    }

    #[test]
    fn joint_rotation_keeps_dice() {
        let d = gen_blobs_3d(9, 2, 16, 2).unwrap();
        let (truth, pred) = (&d.samples[0].mask, &d.samples[1].mask);
        let labels = |m: &[u8]| m.iter().map(|&l| l as usize).collect::<Vec<_>>();
        let before = seg_metrics(&labels(pred), &labels(truth), 2).unwrap();
        let rt = rotate_mask(truth, &[16, 16, 16], 90.0, Axis::Y).unwrap();
        let rp = rotate_mask(pred, &[16, 16, 16], 90.0, Axis::Y).unwrap();
        let after = seg_metrics(&labels(&rp), &labels(&rt), 2).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn flat_images_rejected() {
        let img = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(rotate_image(&img, 30.0, Axis::Z), Err(Error::Unsupported(_))));
        assert!(is_standard_angle(45.0) && !is_standard_angle(10.0));
    }
}
