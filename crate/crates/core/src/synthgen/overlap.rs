use serde::{Deserialize, Serialize};

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

/// Distribution of per-voxel label counts over labeled voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapHistogram {
    /// `fractions[k - 1]` is the share of labeled voxels with exactly `k` labels.
    pub fractions: Vec<f64>,
    pub labeled_voxels: usize,
}

impl OverlapHistogram {
    /// Share of labeled voxels carrying at least `k` labels.
    pub fn at_least(&self, k: usize) -> f64 {
        self.fractions.iter().skip(k.saturating_sub(1)).sum()
    }

    pub fn multi_label(&self) -> f64 {
        self.at_least(2)
    }

    /// `k,fraction` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("labels,fraction\n");
        for (i, f) in self.fractions.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, f));
        }
        s
    }
}

/// Histogram of label counts for labels shaped `[C, ...]`, ignoring unlabeled voxels.
pub fn overlap_stats(labels: &Tensor) -> Result<OverlapHistogram> {
    if !labels.is_binary() {
        return Err(Error::Contract("overlap_stats needs binary labels".into()));
    }
    let classes = labels.shape()[0];
    let nvox = labels.len() / classes;
    let mut counts = vec![0usize; classes + 1];
    let data = labels.data();
    for v in 0..nvox {
        let k = (0..classes).filter(|&c| data[c * nvox + v] != 0.0).count();
        counts[k] += 1;
    }
    let labeled = nvox - counts[0];
    if labeled == 0 {
        return Err(Error::EmptyHistogram);
    }
    Ok(OverlapHistogram {
        fractions: counts[1..]
            .iter()
            .map(|&c| c as f64 / labeled as f64)
            .collect(),
        labeled_voxels: labeled,
    })
}

/// Pooled histogram over several label volumes.
pub fn pooled_overlap_stats<'a>(labels: impl IntoIterator<Item = &'a Tensor>) -> Result<OverlapHistogram> {
    let mut totals: Vec<f64> = Vec::new();
    let mut labeled = 0usize;
    for l in labels {
        match overlap_stats(l) {
            Ok(h) => {
                if totals.len() < h.fractions.len() {
                    totals.resize(h.fractions.len(), 0.0);
                }
                for (t, f) in totals.iter_mut().zip(&h.fractions) {
                    *t += f * h.labeled_voxels as f64;
                }
                labeled += h.labeled_voxels;
            }
            Err(Error::EmptyHistogram) => {}
            Err(e) => return Err(e),
        }
    }
    if labeled == 0 {
        return Err(Error::EmptyHistogram);
    }
    Ok(OverlapHistogram {
        fractions: totals.iter().map(|t| t / labeled as f64).collect(),
        labeled_voxels: labeled,
    })
}
