//! Tube-shaped tract templates and their rasterization.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::preset::OverlapPreset;
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::seed;

pub type Vec3 = [f64; 3];

/// Number of peak slots in the input encoding; each slot holds one 3-vector.
pub const PEAK_SLOTS: usize = 3;
/// Input channels: three peaks of three components each.
pub const INPUT_CHANNELS: usize = PEAK_SLOTS * 3;

const CENTERLINE_SEGMENTS: usize = 12;

/// One tract: a polyline centerline with a tube radius. Coordinates are in
/// voxel units, ordered like the volume axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractSpec {
    pub class: usize,
    pub centerline: Vec<Vec3>,
    pub radius: f64,
    /// Unit tangent of each centerline segment.
    pub directions: Vec<Vec3>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Any unit vector orthogonal to `d`.
fn orthogonal(d: Vec3) -> Vec3 {
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    unit(cross(d, helper))
}

/// `n` well-spread unit vectors on the upper hemisphere (golden-angle spiral).
fn hemisphere_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [z, r * phi.cos(), r * phi.sin()]
        })
        .collect()
}

/// `d` tilted by an angle drawn from `[0, max_angle]` about a random orthogonal axis.
fn tilt(d: Vec3, max_angle: f64, rng: &mut impl Rng) -> Vec3 {
    if max_angle <= 0.0 {
        return d;
    }
    let a = orthogonal(d);
    let b = cross(d, a);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let off = add(scale(a, phi.cos()), scale(b, phi.sin()));
    let theta = rng.random_range(0.0..=max_angle);
    unit(add(scale(d, theta.cos()), scale(off, theta.sin())))
}

/// Dataset-level anatomy: one tract per class, shared by all subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractTemplate {
    pub extent: [usize; 3],
    pub tracts: Vec<TractSpec>,
}

struct ClassShape {
    hub: Vec3,
    direction: Vec3,
    bend: Vec3,
    half_length: f64,
    radius: f64,
}

fn bezier(p0: Vec3, p1: Vec3, p2: Vec3, t: f64) -> Vec3 {
    let a = scale(p0, (1.0 - t) * (1.0 - t));
    let b = scale(p1, 2.0 * (1.0 - t) * t);
    let c = scale(p2, t * t);
    add(add(a, b), c)
}

fn clamp_point(p: Vec3, extent: [usize; 3]) -> Vec3 {
    [
        p[0].clamp(0.0, extent[0] as f64 - 1.0),
        p[1].clamp(0.0, extent[1] as f64 - 1.0),
        p[2].clamp(0.0, extent[2] as f64 - 1.0),
    ]
}

fn build_tract(class: usize, s: &ClassShape, extent: [usize; 3]) -> Result<TractSpec> {
    let p0 = sub(s.hub, scale(s.direction, s.half_length));
    let p2 = add(s.hub, scale(s.direction, s.half_length));
    let p1 = add(s.hub, s.bend);
    let mut centerline: Vec<Vec3> = Vec::with_capacity(CENTERLINE_SEGMENTS + 1);
    for i in 0..=CENTERLINE_SEGMENTS {
        let p = clamp_point(bezier(p0, p1, p2, i as f64 / CENTERLINE_SEGMENTS as f64), extent);
        if centerline.last().is_none_or(|q| norm(sub(p, *q)) > 1e-9) {
            centerline.push(p);
        }
    }
    if centerline.len() < 2 {
        return Err(Error::Generation(format!(
            "class {class}: centerline collapsed after clipping to {extent:?}"
        )));
    }
    let directions = centerline
        .windows(2)
        .map(|w| unit(sub(w[1], w[0])))
        .collect();
    if s.radius < 1.0 {
        return Err(Error::Generation(format!(
            "class {class}: radius {} below 1 voxel",
            s.radius
        )));
    }
    Ok(TractSpec {
        class,
        centerline,
        radius: s.radius,
        directions,
    })
}

impl TractTemplate {
    /// Draws the shared anatomy. Classes come in proximity groups of
    /// `preset.group_size` that share a hub region.
    pub fn generate(seed_: u64, extent: [usize; 3], classes: usize, preset: &OverlapPreset) -> Result<Self> {
        let mut rng = seed::rng(&[seed_, 0x7E3A]);
        let group_size = preset.group_size.max(1);
        let groups = classes.div_ceil(group_size);
        let mut dirs = hemisphere_directions(groups);
        dirs.shuffle(&mut rng);
        let center: Vec3 = [
            (extent[0] as f64 - 1.0) / 2.0,
            (extent[1] as f64 - 1.0) / 2.0,
            (extent[2] as f64 - 1.0) / 2.0,
        ];
        let min_extent = *extent.iter().min().unwrap() as f64;
        let half = min_extent / 2.0;
        let group_hubs: Vec<Vec3> = (0..groups)
            .map(|_| {
                let off: Vec3 = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                add(center, scale(off, preset.hub_spread * half))
            })
            .collect();
        let tracts = (0..classes)
            .map(|c| {
                let hub_jitter: Vec3 = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let direction = tilt(dirs[c / group_size], preset.direction_spread, &mut rng);
                let bend_dir = orthogonal(direction);
                let twist = rng.random_range(0.0..std::f64::consts::TAU);
                let bend_dir = add(
                    scale(bend_dir, twist.cos()),
                    scale(cross(direction, bend_dir), twist.sin()),
                );
                let shape = ClassShape {
                    hub: add(group_hubs[c / group_size], scale(hub_jitter, preset.group_jitter)),
                    direction,
                    bend: scale(bend_dir, preset.curvature * min_extent),
                    half_length: preset.length * min_extent / 2.0,
                    radius: rng.random_range(preset.radius[0]..=preset.radius[1]),
                };
                build_tract(c, &shape, extent)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { extent, tracts })
    }

    /// Per-subject variant: hubs, bends and radii jittered by the subject stream.
    pub fn subject_variant(&self, subject_seed: u64, preset: &OverlapPreset) -> Result<Vec<TractSpec>> {
        let mut rng = seed::rng(&[subject_seed, 0x5B7]);
        let jitter = Normal::new(0.0, preset.subject_jitter.max(0.0))
            .map_err(|e| Error::Generation(e.to_string()))?;
        let radius_scale = rng.random_range(0.9..1.1);
        self.tracts
            .iter()
            .map(|t| {
                let shift: Vec3 = [
                    jitter.sample(&mut rng),
                    jitter.sample(&mut rng),
                    jitter.sample(&mut rng),
                ];
                let radius = (t.radius * radius_scale).max(1.0);
                let centerline: Vec<Vec3> = t
                    .centerline
                    .iter()
                    .map(|&p| clamp_point(add(p, shift), self.extent))
                    .collect();
                let mut pts: Vec<Vec3> = Vec::with_capacity(centerline.len());
                for p in centerline {
                    if pts.last().is_none_or(|q| norm(sub(p, *q)) > 1e-9) {
                        pts.push(p);
                    }
                }
                if pts.len() < 2 {
                    return Err(Error::Generation(format!(
                        "class {}: subject centerline collapsed",
                        t.class
                    )));
                }
                let directions = pts.windows(2).map(|w| unit(sub(w[1], w[0]))).collect();
                Ok(TractSpec {
                    class: t.class,
                    centerline: pts,
                    radius,
                    directions,
                })
            })
            .collect()
    }

    /// Mean centerline point per class.
    pub fn centroids(&self) -> Vec<Vec3> {
        self.tracts
            .iter()
            .map(|t| {
                let n = t.centerline.len() as f64;
                let s = t.centerline.iter().fold([0.0; 3], |a, &p| add(a, p));
                scale(s, 1.0 / n)
            })
            .collect()
    }
}

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(sub(p, add(a, scale(ab, t))))
}

/// Rasterized tubes: labels `[C, D, H, W]` and the per-voxel tangent of each
/// class (zero where the class is absent).
pub(crate) struct Raster {
    pub labels: Vec<u8>,
    pub tangents: Vec<Vec3>,
}

pub(crate) fn rasterize(tracts: &[TractSpec], extent: [usize; 3]) -> Raster {
    let [d, h, w] = extent;
    let nvox = d * h * w;
    let mut labels = vec![0u8; tracts.len() * nvox];
    let mut tangents = vec![[0.0; 3]; tracts.len() * nvox];
    for (c, t) in tracts.iter().enumerate() {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &t.centerline {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a] - t.radius);
                hi[a] = hi[a].max(p[a] + t.radius);
            }
        }
        let range = |a: usize, n: usize| {
            let s = lo[a].floor().max(0.0) as usize;
            let e = (hi[a].ceil().max(0.0) as usize + 1).min(n);
            s..e
        };
        for z in range(0, d) {
            for y in range(1, h) {
                for x in range(2, w) {
                    let p = [z as f64, y as f64, x as f64];
                    let mut best = f64::INFINITY;
                    let mut seg = 0;
                    for (i, win) in t.centerline.windows(2).enumerate() {
                        let dist = segment_distance(p, win[0], win[1]);
                        if dist < best {
                            best = dist;
                            seg = i;
                        }
                    }
                    if best <= t.radius {
                        let v = (z * h + y) * w + x;
                        labels[c * nvox + v] = 1;
                        tangents[c * nvox + v] = t.directions[seg];
                    }
                }
            }
        }
    }
    Raster { labels, tangents }
}

/// Peak-slot encoding: the first three classes present at a voxel (by class
/// order) fill the three slots; any further class is added, sign-aligned, to
/// the slot it is angularly closest to.
pub(crate) fn encode_peaks(raster: &Raster, classes: usize, nvox: usize) -> Vec<f64> {
    let mut input = vec![0.0; INPUT_CHANNELS * nvox];
    for v in 0..nvox {
        let mut slots: [Vec3; PEAK_SLOTS] = [[0.0; 3]; PEAK_SLOTS];
        let mut filled = 0;
        for c in 0..classes {
            if raster.labels[c * nvox + v] == 0 {
                continue;
            }
            let dir = raster.tangents[c * nvox + v];
            if filled < PEAK_SLOTS {
                slots[filled] = dir;
                filled += 1;
            } else {
                let (best, _) = slots
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i, dot(*s, dir).abs() / norm(*s).max(1e-12)))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                let sign = if dot(slots[best], dir) < 0.0 { -1.0 } else { 1.0 };
                slots[best] = add(slots[best], scale(dir, sign));
            }
        }
        for (s, vec) in slots.iter().enumerate() {
            for comp in 0..3 {
                input[(s * 3 + comp) * nvox + v] = vec[comp];
            }
        }
    }
    input
}

pub(crate) fn labels_tensor(labels: &[u8], classes: usize, extent: [usize; 3]) -> Tensor {
    Tensor::new(
        vec![classes, extent[0], extent[1], extent[2]],
        labels.iter().map(|&v| v as f64).collect(),
    )
    .expect("raster size matches extent")
}
