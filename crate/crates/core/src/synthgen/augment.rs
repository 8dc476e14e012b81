//! Spatial and intensity augmentation of a subject volume.
//!
//! Rotation, zoom and displacement share one inverse-mapped resampling pass
//! (trilinear for input, nearest for labels, zero outside the volume). Flips
//! are exact index reversals applied afterwards. Peak vectors are rotated and
//! sign-flipped along with the grid so the encoding stays consistent.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tract::{PEAK_SLOTS, INPUT_CHANNELS};
use super::MultiLabelVolume;
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Reference extent the displacement range is quoted for.
const REFERENCE_EXTENT: f64 = 144.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Rotation angle in radians, applied in the plane of `plane`.
    pub rotation: f64,
    pub plane: (usize, usize),
    pub zoom: f64,
    pub flip: [bool; 3],
    /// Displacement per axis in voxels.
    pub shift: [f64; 3],
    /// Standard deviation of additive input noise.
    pub noise_sigma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            plane: (1, 2),
            zoom: 1.0,
            flip: [false; 3],
            shift: [0.0; 3],
            noise_sigma: 0.0,
        }
    }

    /// Draws a transform: angle in [-pi/4, pi/4], zoom in [0.9, 1.5], each axis
    /// flipped with probability 1/2, in-plane displacement in [-10, 10] voxels
    /// scaled by `extent / 144`, noise deviation in [0, 0.05].
    pub fn sample(rng: &mut impl Rng, extent: [usize; 3]) -> Self {
        let planes = [(0, 1), (0, 2), (1, 2)];
        let plane = planes[rng.random_range(0..3)];
        let rotation = rng.random_range(-std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_4);
        let zoom = rng.random_range(0.9..=1.5);
        let flip = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let mut shift = [0.0; 3];
        for a in [plane.0, plane.1] {
            let range = 10.0 * extent[a] as f64 / REFERENCE_EXTENT;
            shift[a] = rng.random_range(-range..=range);
        }
        let noise_sigma = rng.random_range(0.0..=0.05);
        Self {
            rotation,
            plane,
            zoom,
            flip,
            shift,
            noise_sigma,
        }
    }

    fn is_resampling_identity(&self) -> bool {
        self.rotation == 0.0 && self.zoom == 1.0 && self.shift == [0.0; 3]
    }

    /// Rotation matrix acting on 3-vectors in axis order.
    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (a, b) = self.plane;
        let (s, c) = self.rotation.sin_cos();
        m[a][a] = c;
        m[a][b] = -s;
        m[b][a] = s;
        m[b][b] = c;
        m
    }
}

/// Augments `volume` with parameters drawn from `seed`.
pub fn augment(volume: &MultiLabelVolume, seed_: u64) -> Result<MultiLabelVolume> {
    let extent = volume.extent();
    let mut rng = seed::rng(&[seed_, 0xA09]);
    let params = AugmentParams::sample(&mut rng, extent);
    apply_augmentation(volume, &params, rng.random())
}

pub fn apply_augmentation(volume: &MultiLabelVolume, params: &AugmentParams, noise_seed: u64) -> Result<MultiLabelVolume> {
    let extent = volume.extent();
    let [d, h, w] = extent;
    let nvox = d * h * w;
    let cin = volume.input.shape()[0];
    let clab = volume.labels.shape()[0];
    let mut input = volume.input.data().to_vec();
    let mut labels = volume.labels.data().to_vec();
    let peaks = cin == INPUT_CHANNELS;

    if !params.is_resampling_identity() {
        let rot = params.rotation_matrix();
        let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
        let mut new_input = vec![0.0; cin * nvox];
        let mut new_labels = vec![0.0; clab * nvox];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let q = [z as f64, y as f64, x as f64];
                    // inverse map: p = c + R^T (q - c - t) / zoom
                    let r = [
                        (q[0] - center[0] - params.shift[0]) / params.zoom,
                        (q[1] - center[1] - params.shift[1]) / params.zoom,
                        (q[2] - center[2] - params.shift[2]) / params.zoom,
                    ];
                    let mut p = center;
                    for (i, pi) in p.iter_mut().enumerate() {
                        *pi += rot[0][i] * r[0] + rot[1][i] * r[1] + rot[2][i] * r[2];
                    }
                    let v = (z * h + y) * w + x;
                    for c in 0..cin {
                        new_input[c * nvox + v] = trilinear(&input[c * nvox..(c + 1) * nvox], extent, p);
                    }
                    let nearest = [p[0].round(), p[1].round(), p[2].round()];
                    if (0..3).all(|a| nearest[a] >= 0.0 && nearest[a] <= extent[a] as f64 - 1.0) {
                        let src = (nearest[0] as usize * h + nearest[1] as usize) * w + nearest[2] as usize;
                        for c in 0..clab {
                            new_labels[c * nvox + v] = labels[c * nvox + src];
                        }
                    }
                }
            }
        }
        if peaks {
            rotate_peaks(&mut new_input, nvox, &rot);
        }
        input = new_input;
        labels = new_labels;
    }

    for axis in 0..3 {
        if params.flip[axis] {
            flip_axis(&mut input, cin, extent, axis);
            flip_axis(&mut labels, clab, extent, axis);
            if peaks {
                for s in 0..PEAK_SLOTS {
                    let ch = s * 3 + axis;
                    input[ch * nvox..(ch + 1) * nvox].iter_mut().for_each(|v| *v = -*v);
                }
            }
        }
    }

    if params.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
        let mut rng = seed::rng(&[noise_seed, 0x401]);
        input.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    Ok(MultiLabelVolume {
        input: Tensor::new(volume.input.shape().to_vec(), input)?,
        labels: Tensor::new(volume.labels.shape().to_vec(), labels)?,
        subject_id: volume.subject_id.clone(),
    })
}

fn trilinear(plane: &[f64], extent: [usize; 3], p: [f64; 3]) -> f64 {
    let [d, h, w] = extent;
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut weight = 1.0;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            weight *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            idx[a] = base[a] as i64 + off[a] as i64;
        }
        if weight == 0.0 {
            continue;
        }
        if idx[0] < 0 || idx[1] < 0 || idx[2] < 0 || idx[0] >= d as i64 || idx[1] >= h as i64 || idx[2] >= w as i64 {
            continue;
        }
        acc += weight * plane[(idx[0] as usize * h + idx[1] as usize) * w + idx[2] as usize];
    }
    acc
}

fn rotate_peaks(input: &mut [f64], nvox: usize, rot: &[[f64; 3]; 3]) {
    for s in 0..PEAK_SLOTS {
        for v in 0..nvox {
            let vec = [
                input[(s * 3) * nvox + v],
                input[(s * 3 + 1) * nvox + v],
                input[(s * 3 + 2) * nvox + v],
            ];
            for (i, row) in rot.iter().enumerate() {
                input[(s * 3 + i) * nvox + v] = row[0] * vec[0] + row[1] * vec[1] + row[2] * vec[2];
            }
        }
    }
}

fn flip_axis(data: &mut [f64], channels: usize, extent: [usize; 3], axis: usize) {
    let [d, h, w] = extent;
    let nvox = d * h * w;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for c in 0..channels {
        let plane = &mut data[c * nvox..(c + 1) * nvox];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (z2, y2, x2) = match axis {
                        0 => (d - 1 - z, y, x),
                        1 => (z, h - 1 - y, x),
                        _ => (z, y, w - 1 - x),
                    };
                    let (a, b) = (idx(z, y, x), idx(z2, y2, x2));
                    if a < b {
                        plane.swap(a, b);
                    }
                }
            }
        }
    }
}
