//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-coordinate relative error between analytic and numeric gradients.
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn evaluate<F>(f: &F, point: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point, false);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the analytic gradient of `f` at `point` with central differences.
///
/// `f` builds a scalar from the input node it is handed. Every coordinate is
/// perturbed by `±step`; a non-finite value at the point or any perturbed
/// point is an error.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    if !g.value(y).all_finite() {
        return Err(Error::Evaluation("non-finite value at the check point".into()));
    }
    let grads = g.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let mut errors = Vec::with_capacity(point.len());
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let plus = evaluate(&f, Tensor::new(point.shape().to_vec(), data.clone())?)?;
        data[i] = orig - step;
        let minus = evaluate(&f, Tensor::new(point.shape().to_vec(), data.clone())?)?;
        data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value at coordinate {i} perturbed by {step}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        errors.push(relative_error(analytic.data()[i], numeric));
    }
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        errors,
        max_error,
        tolerance,
    })
}
