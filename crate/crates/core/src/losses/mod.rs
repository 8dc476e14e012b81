//! Incremental-step losses: uncertainty-weighted distillation, novel-class
//! segmentation, multi-label voxel contrast and homoscedastic task weighting.
//!
//! Prediction tensors are laid out `[classes, voxels]`. Per-class terms are
//! averaged over voxels before the class average, so magnitudes do not depend
//! on image size.

use serde::{Deserialize, Serialize};

use crate::diffkernel::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Component order used by [`LossWeightState`] and [`total_loss`].
pub const SEG: usize = 0;
pub const DIS: usize = 1;
pub const VC: usize = 2;

/// Confidence of the frozen model: `|2z - 1|`, zero at 0.5 and one at 0 or 1.
pub fn uncertainty_map(z_old: &Tensor) -> Tensor {
    z_old.map(|z| if z > 0.5 { 2.0 * z - 1.0 } else { 1.0 - 2.0 * z })
}

fn check_pair(op: &'static str, g: &Graph, z: Var, other: &Tensor) -> Result<()> {
    if g.shape(z) != other.shape() {
        return Err(Error::dim(
            op,
            format!("predictions {:?} vs reference {:?}", g.shape(z), other.shape()),
        ));
    }
    Ok(())
}

/// Mean over all entries of `w * (t * log z + (1 - t) * log(1 - z))`, negated.
fn weighted_bce(g: &mut Graph, z: Var, target: &Tensor, weight: Option<&Tensor>) -> Result<Var> {
    let t = g.constant(target.clone());
    let not_t = g.constant(target.map(|v| 1.0 - v));
    let log_z = g.log(z);
    let one_minus = g.affine(z, -1.0, 1.0);
    let log_1mz = g.log(one_minus);
    let a = g.mul(t, log_z)?;
    let b = g.mul(not_t, log_1mz)?;
    let mut term = g.add(a, b)?;
    if let Some(w) = weight {
        let w = g.constant(w.clone());
        term = g.mul(w, term)?;
    }
    let m = g.mean(term);
    Ok(g.neg(m))
}

/// Soft-target cross-entropy between the frozen base head `z_old` and the
/// current base head `z_new`, weighted per voxel by the constant `um`.
pub fn distillation_loss(g: &mut Graph, z_old: &Tensor, z_new: Var, um: &Tensor) -> Result<Var> {
    check_pair("distillation_loss", g, z_new, z_old)?;
    check_pair("distillation_loss", g, z_new, um)?;
    weighted_bce(g, z_new, z_old, Some(um))
}

/// Binary cross-entropy of the novel head against the one-shot labels.
pub fn segmentation_loss(g: &mut Graph, z: Var, y: &Tensor) -> Result<Var> {
    check_pair("segmentation_loss", g, z, y)?;
    if !y.is_binary() {
        return Err(Error::Contract("segmentation_loss needs binary labels".into()));
    }
    weighted_bce(g, z, y, None)
}

/// Number of labels two voxels share.
pub fn label_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "label_similarity",
            format!("label vectors of length {} and {}", a.len(), b.len()),
        ));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Coefficients of every row relative to the anchor row: label similarity
/// normalized over all other rows, zero at the anchor itself. `None` when the
/// anchor has no other row or shares no label with any of them.
pub fn dynamic_coefficients(labels: &[f64], classes: usize, anchor: usize) -> Option<Vec<f64>> {
    let rows = labels.len() / classes;
    if rows < 2 {
        return None;
    }
    let row = |r: usize| &labels[r * classes..(r + 1) * classes];
    let p = row(anchor);
    let c: Vec<f64> = (0..rows)
        .map(|q| {
            if q == anchor {
                0.0
            } else {
                p.iter().zip(row(q)).map(|(x, y)| x * y).sum()
            }
        })
        .collect();
    let total: f64 = c.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(c.into_iter().map(|v| v / total).collect())
}

/// Label vectors and anchor rows of one sampled slice.
#[derive(Clone, Copy, Debug)]
pub struct ContrastRows<'a> {
    /// Row-major `[S, classes]` binary label vectors.
    pub labels: &'a [f64],
    pub classes: usize,
    pub anchors: &'a [usize],
}

/// Sum of the per-anchor contrastive terms and how many anchors contributed.
#[derive(Clone, Copy, Debug)]
pub struct ContrastTerm {
    pub sum: Option<Var>,
    pub anchors: usize,
}

/// Per anchor `p`: `Σ_q β_pq d_pq / τ + log Σ_q exp(-d_pq / τ)` over all rows
/// `q != p`, which equals `-Σ_q β_pq log softmax_q(-d_p / τ)` because the
/// coefficients sum to one. Anchors without a valid coefficient row are skipped.
pub fn voxel_contrast_sum(g: &mut Graph, embeddings: Var, rows: ContrastRows<'_>, tau: f64) -> Result<ContrastTerm> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || rows.classes == 0 || rows.labels.len() != shape[0] * rows.classes {
        return Err(Error::dim(
            "voxel_contrast_loss",
            format!(
                "embeddings {shape:?} with {} label entries over {} classes",
                rows.labels.len(),
                rows.classes
            ),
        ));
    }
    let s = shape[0];
    let mut kept = Vec::new();
    let mut beta = Vec::new();
    for &a in rows.anchors {
        if a >= s {
            return Err(Error::dim("voxel_contrast_loss", format!("anchor row {a} outside {s} rows")));
        }
        if let Some(b) = dynamic_coefficients(rows.labels, rows.classes, a) {
            kept.push(a);
            beta.extend(b);
        }
    }
    if kept.is_empty() {
        return Ok(ContrastTerm { sum: None, anchors: 0 });
    }
    let k = kept.len();
    let mut mask = vec![true; k * s];
    for (i, &a) in kept.iter().enumerate() {
        mask[i * s + a] = false;
    }
    let anchors = g.gather_rows(embeddings, &kept)?;
    let d = g.pairwise_distance(anchors, embeddings)?;
    let beta = g.constant(Tensor::new(vec![k, s], beta)?);
    let bd = g.mul(d, beta)?;
    let pull = g.sum(bd);
    let pull = g.affine(pull, 1.0 / tau, 0.0);
    let logits = g.affine(d, -1.0 / tau, 0.0);
    let lse = g.row_logsumexp(logits, Some(mask))?;
    let push = g.sum(lse);
    let sum = g.add(pull, push)?;
    Ok(ContrastTerm { sum: Some(sum), anchors: k })
}

/// Mean contrastive term over the anchors of several slices; a constant zero
/// when no anchor contributes.
pub fn mean_contrast(g: &mut Graph, terms: &[ContrastTerm]) -> Result<(Var, usize)> {
    let count: usize = terms.iter().map(|t| t.anchors).sum();
    let parts: Vec<Var> = terms.iter().filter_map(|t| t.sum).collect();
    if count == 0 {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok((g.affine(acc, 1.0 / count as f64, 0.0), count))
}

/// Multi-label voxel contrastive loss of one sample set, averaged over anchors.
pub fn voxel_contrast_loss(g: &mut Graph, embeddings: Var, rows: ContrastRows<'_>, tau: f64) -> Result<(Var, usize)> {
    let term = voxel_contrast_sum(g, embeddings, rows, tau)?;
    mean_contrast(g, &[term])
}

/// Learnable log-variances `s` for (segmentation, distillation, contrast).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightState {
    pub s: [f64; 3],
}

impl Default for LossWeightState {
    fn default() -> Self {
        Self { s: [0.0; 3] }
    }
}

impl LossWeightState {
    pub fn weights(&self) -> [f64; 3] {
        self.s.map(|v| (-v).exp())
    }
}

/// Combines the enabled components. With `s` (a `[3]` node) the result is
/// `Σ exp(-s_i) L_i + s_i`; without it the plain sum.
pub fn total_loss(g: &mut Graph, components: [Option<Var>; 3], s: Option<Var>) -> Result<Var> {
    const NAMES: [&str; 3] = ["segmentation", "distillation", "contrast"];
    let mut acc: Option<Var> = None;
    for (i, c) in components.iter().enumerate() {
        let Some(l) = *c else { continue };
        let v = g.value(l);
        if v.len() != 1 {
            return Err(Error::dim("total_loss", format!("{} loss has shape {:?}", NAMES[i], v.shape())));
        }
        if !v.item().is_finite() {
            return Err(Error::Numeric(format!("{} loss is {}", NAMES[i], v.item())));
        }
        let term = match s {
            Some(s) => {
                let si = g.slice(s, i, i + 1)?;
                let neg = g.neg(si);
                let w = g.exp(neg);
                let wl = g.mul(w, l)?;
                g.add(wl, si)?
            }
            None => l,
        };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Config("every loss component is disabled".into()))
}
