use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum overlap a generated subject must reach, as fractions of labeled voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapTargets {
    /// Fraction of labeled voxels carrying two or more labels.
    pub min_multi_label: f64,
    /// Fraction of labeled voxels carrying three or more labels.
    pub min_three_plus: f64,
}

/// Geometry knobs controlling how much the synthetic tracts overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapPreset {
    pub name: String,
    /// Tube radius range in voxels.
    pub radius: [f64; 2],
    /// Group hub offsets from the volume center, as a fraction of the half extent.
    pub hub_spread: f64,
    /// Per-class hub offset inside its group, in voxels.
    pub group_jitter: f64,
    /// Tract length as a fraction of the smallest extent.
    pub length: f64,
    /// Bend of the centerline midpoint as a fraction of the smallest extent.
    pub curvature: f64,
    /// Classes sharing a hub region and a main direction.
    pub group_size: usize,
    /// Largest angle (radians) between a class direction and its group direction.
    pub direction_spread: f64,
    /// Standard deviation of the input noise.
    pub noise_sigma: f64,
    /// Standard deviation (voxels) of the per-subject centerline shift.
    pub subject_jitter: f64,
    pub targets: OverlapTargets,
}

impl OverlapPreset {
    /// Dense bundles: most labeled voxels are multi-label.
    pub fn hcp_like() -> Self {
        Self {
            name: "hcp-like".into(),
            radius: [3.5, 5.0],
            hub_spread: 0.25,
            group_jitter: 0.8,
            length: 0.8,
            curvature: 0.1,
            group_size: 4,
            direction_spread: 0.15,
            noise_sigma: 0.05,
            subject_jitter: 0.5,
            targets: OverlapTargets {
                min_multi_label: 0.6,
                min_three_plus: 0.2,
            },
        }
    }

    /// Benchmark preset: overlapping bundles that a small network can still separate.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            radius: [2.5, 3.5],
            hub_spread: 0.35,
            group_jitter: 1.5,
            length: 0.9,
            curvature: 0.12,
            group_size: 4,
            direction_spread: 0.35,
            noise_sigma: 0.05,
            subject_jitter: 0.5,
            targets: OverlapTargets {
                min_multi_label: 0.3,
                min_three_plus: 0.05,
            },
        }
    }

    /// Widely spread tracts with little overlap.
    pub fn sparse() -> Self {
        Self {
            name: "sparse".into(),
            radius: [2.0, 3.0],
            hub_spread: 0.8,
            group_jitter: 4.0,
            length: 0.6,
            curvature: 0.1,
            group_size: 1,
            direction_spread: 0.0,
            noise_sigma: 0.05,
            subject_jitter: 0.5,
            targets: OverlapTargets {
                min_multi_label: 0.0,
                min_three_plus: 0.0,
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "hcp-like" => Ok(Self::hcp_like()),
            "desk" => Ok(Self::desk()),
            "sparse" => Ok(Self::sparse()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected hcp-like, desk or sparse)"
            ))),
        }
    }
}
