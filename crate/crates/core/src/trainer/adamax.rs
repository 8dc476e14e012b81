//! Adamax: Adam with an infinity-norm second moment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One named parameter buffer and its gradient for a single update.
pub struct Slot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Moments for a fixed, ordered list of parameter buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adamax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    first: Vec<Vec<f64>>,
    inf_norm: Vec<Vec<f64>>,
}

impl Adamax {
    pub fn new(lr: f64, sizes: &[usize]) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            inf_norm: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first[i]
    }

    pub fn inf_moment(&self, i: usize) -> &[f64] {
        &self.inf_norm[i]
    }

    /// Applies one update to every slot. Nothing changes unless all gradients
    /// are finite and all shapes match.
    pub fn update(&mut self, slots: &mut [Slot<'_>]) -> Result<()> {
        if slots.len() != self.first.len() {
            return Err(Error::dim(
                "adamax",
                format!("{} slots for {} moment buffers", slots.len(), self.first.len()),
            ));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.value.len() != self.first[i].len() || s.grad.len() != s.value.len() {
                return Err(Error::dim(
                    "adamax",
                    format!(
                        "{}: value {} / gradient {} entries, state {}",
                        s.name,
                        s.value.len(),
                        s.grad.len(),
                        self.first[i].len()
                    ),
                ));
            }
            if let Some(bad) = s.grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {bad} for parameter {}", s.name)));
            }
        }
        self.step += 1;
        let rate = self.lr / (1.0 - self.beta1.powi(self.step as i32));
        for (i, s) in slots.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let u = &mut self.inf_norm[i];
            for k in 0..s.value.len() {
                let g = s.grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                u[k] = (self.beta2 * u[k]).max(g.abs());
                s.value[k] -= rate * m[k] / (u[k] + self.eps);
            }
        }
        Ok(())
    }
}
