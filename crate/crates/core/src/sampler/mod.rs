//! Region partitioning, contrastive sample selection and sorted-batch subsetting.

mod edt;

pub use edt::squared_edt;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Default boundary band half-width in voxels.
pub const DEFAULT_THETA: f64 = 2.0;

/// Inner, outer and background voxel indices of one class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub inner: Vec<usize>,
    pub outer: Vec<usize>,
    pub background: Vec<usize>,
    pub theta: f64,
}

/// Splits the voxels of `mask` by their distance to the nearest voxel of the
/// opposite label: beyond `theta` inside the mask is inner, beyond `theta`
/// outside is background, the band in between is outer.
pub fn partition_regions(mask: &Tensor, theta: f64) -> Result<RegionPartition> {
    if !(theta >= 1.0) {
        return Err(Error::Config(format!("theta must be at least 1, got {theta}")));
    }
    if !mask.is_binary() {
        return Err(Error::Contract("partition_regions needs a binary mask".into()));
    }
    let inside: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let to_outside = squared_edt(&outside, mask.shape());
    let to_inside = squared_edt(&inside, mask.shape());
    let limit = theta * theta;
    let mut p = RegionPartition {
        inner: Vec::new(),
        outer: Vec::new(),
        background: Vec::new(),
        theta,
    };
    for (v, &is_in) in inside.iter().enumerate() {
        let d2 = if is_in { to_outside[v] } else { to_inside[v] };
        match (is_in, d2 > limit) {
            (true, true) => p.inner.push(v),
            (false, true) => p.background.push(v),
            _ => p.outer.push(v),
        }
    }
    Ok(p)
}

/// Partitions every channel of labels shaped `[C, ...]`.
pub fn partition_classes(labels: &Tensor, theta: f64) -> Result<Vec<RegionPartition>> {
    (0..labels.shape()[0])
        .map(|c| {
            let mask = labels.slice_leading(c, c + 1)?.reshape(&labels.shape()[1..])?;
            partition_regions(&mask, theta)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Unrestricted uniform draws.
    #[serde(rename = "random")]
    Random,
    /// Equal draws inside and outside the mask.
    #[serde(rename = "balanced")]
    Balanced,
    /// Equal draws from the inner, outer and background regions.
    #[default]
    #[serde(rename = "balanced+hard")]
    BalancedHard,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "balanced" => Ok(Strategy::Balanced),
            "balanced+hard" => Ok(Strategy::BalancedHard),
            other => Err(Error::Config(format!(
                "unknown sampling strategy {other:?} (expected random, balanced or balanced+hard)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Balanced => "balanced",
            Strategy::BalancedHard => "balanced+hard",
        })
    }
}

/// Row of an anchor inside a [`SampleSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub class: usize,
    pub row: usize,
}

/// Sampled voxels of one slice. Each present class contributes its anchor row
/// followed by its samples; `labels` holds the full label vector of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub voxels: Vec<usize>,
    /// Row-major `[S, classes]` binary label vectors.
    pub labels: Vec<f64>,
    pub classes: usize,
    pub anchors: Vec<Anchor>,
    pub skipped: Vec<(usize, String)>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn label_row(&self, row: usize) -> &[f64] {
        &self.labels[row * self.classes..(row + 1) * self.classes]
    }
}

/// `n` indices into `pool`, never picking position `exclude`. Without
/// replacement unless the pool is too small.
fn draw(pool: &[usize], exclude: Option<usize>, n: usize, rng: &mut impl Rng, class: usize) -> Vec<usize> {
    let avail = pool.len() - usize::from(exclude.is_some());
    let map = |i: usize| match exclude {
        Some(e) if i >= e => pool[i + 1],
        _ => pool[i],
    };
    if avail >= n {
        index::sample(rng, avail, n).into_iter().map(map).collect()
    } else {
        log::debug!("class {class}: region of {avail} voxels is smaller than {n}, drawing with replacement");
        (0..n).map(|_| map(rng.random_range(0..avail))).collect()
    }
}

/// Picks anchors and their samples per class. `labels` is `[C, N]` over the
/// same flattened voxels as `partitions`; `seed` should already identify the
/// run, subject and slice.
pub fn draw_samples(
    partitions: &[RegionPartition],
    labels: &Tensor,
    n_s: usize,
    seed_: u64,
    strategy: Strategy,
) -> Result<SampleSet> {
    if !labels.is_binary() {
        return Err(Error::Contract("draw_samples needs binary labels".into()));
    }
    let classes = labels.shape()[0];
    if partitions.len() != classes {
        return Err(Error::dim(
            "draw_samples",
            format!("{} partitions for {classes} label channels", partitions.len()),
        ));
    }
    if n_s == 0 {
        return Err(Error::Config("n_s must be positive".into()));
    }
    let nvox = labels.len() / classes;
    let data = labels.data();
    let mut voxels = Vec::new();
    let mut anchors = Vec::new();
    let mut skipped = Vec::new();
    for (c, part) in partitions.iter().enumerate() {
        let mut rng = seed::rng(&[seed_, c as u64]);
        let mut skip = |why: String| {
            log::debug!("class {c} skipped: {why}");
            skipped.push((c, why));
        };
        let in_mask: Vec<usize> = (0..nvox).filter(|&v| data[c * nvox + v] != 0.0).collect();
        if in_mask.is_empty() {
            skip("empty mask".into());
            continue;
        }
        let picked: Option<(usize, Vec<usize>)> = match strategy {
            Strategy::BalancedHard => {
                if part.inner.is_empty() || part.outer.is_empty() || part.background.is_empty() {
                    skip(format!(
                        "region sizes inner {} outer {} background {}",
                        part.inner.len(),
                        part.outer.len(),
                        part.background.len()
                    ));
                    None
                } else if part.inner.len() < 2 {
                    skip("inner region holds only the anchor".into());
                    None
                } else {
                    let a = rng.random_range(0..part.inner.len());
                    let mut s = draw(&part.inner, Some(a), n_s, &mut rng, c);
                    s.extend(draw(&part.outer, None, n_s, &mut rng, c));
                    s.extend(draw(&part.background, None, n_s, &mut rng, c));
                    Some((part.inner[a], s))
                }
            }
            Strategy::Balanced => {
                let out_mask: Vec<usize> = (0..nvox).filter(|&v| data[c * nvox + v] == 0.0).collect();
                if out_mask.is_empty() || in_mask.len() < 2 {
                    skip(format!("in-mask {} out-of-mask {}", in_mask.len(), out_mask.len()));
                    None
                } else {
                    let a = rng.random_range(0..in_mask.len());
                    let mut s = draw(&in_mask, Some(a), n_s, &mut rng, c);
                    s.extend(draw(&out_mask, None, n_s, &mut rng, c));
                    Some((in_mask[a], s))
                }
            }
            Strategy::Random => {
                let all: Vec<usize> = (0..nvox).collect();
                let a = in_mask[rng.random_range(0..in_mask.len())];
                Some((a, draw(&all, Some(a), 3 * n_s, &mut rng, c)))
            }
        };
        if let Some((anchor, samples)) = picked {
            anchors.push(Anchor {
                class: c,
                row: voxels.len(),
            });
            voxels.push(anchor);
            voxels.extend(samples);
        }
    }
    let mut rows = Vec::with_capacity(voxels.len() * classes);
    for &v in &voxels {
        rows.extend((0..classes).map(|c| data[c * nvox + v]));
    }
    Ok(SampleSet {
        voxels,
        labels: rows,
        classes,
        anchors,
        skipped,
    })
}

/// Fraction of each batch that contributes to the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct BatchRatio(f64);

impl BatchRatio {
    pub const ALLOWED: [f64; 4] = [0.125, 0.25, 0.5, 1.0];
    pub const EIGHTH: BatchRatio = BatchRatio(0.125);
    pub const ONE: BatchRatio = BatchRatio(1.0);

    pub fn new(r: f64) -> Result<Self> {
        if Self::ALLOWED.contains(&r) {
            Ok(Self(r))
        } else {
            Err(Error::Config(format!("batch ratio {r} not one of 1/8, 1/4, 1/2, 1")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Elements kept from a batch of `b`.
    pub fn count(self, b: usize) -> usize {
        (b as f64 * self.0).ceil() as usize
    }
}

impl TryFrom<f64> for BatchRatio {
    type Error = Error;

    fn try_from(r: f64) -> Result<Self> {
        Self::new(r)
    }
}

impl From<BatchRatio> for f64 {
    fn from(r: BatchRatio) -> f64 {
        r.0
    }
}

impl FromStr for BatchRatio {
    type Err = Error;

    /// Accepts `1/8` style fractions or decimals.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse batch ratio {s:?}"));
        let r = match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                a / b
            }
            None => s.trim().parse().map_err(|_| bad())?,
        };
        Self::new(r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSelection {
    pub losses: Vec<f64>,
    /// Element indices sorted by ascending loss, ties by index.
    pub order: Vec<usize>,
    /// Chosen element indices, listed in sorted order.
    pub selected: Vec<usize>,
}

/// Sorts the batch by loss and keeps `ceil(B * ratio)` elements at evenly
/// spaced sorted positions `floor((i + 1/2) * B / k)`.
pub fn select_batch_subset(losses: &[f64], ratio: BatchRatio) -> Result<BatchSelection> {
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("batch element {i} has loss {}", losses[i])));
    }
    let b = losses.len();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&x, &y| losses[x].total_cmp(&losses[y]));
    let k = ratio.count(b);
    let selected = (0..k).map(|i| order[(2 * i + 1) * b / (2 * k)]).collect();
    Ok(BatchSelection {
        losses: losses.to_vec(),
        order,
        selected,
    })
}
