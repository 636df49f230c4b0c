//! Central finite-difference oracle for checking tape gradients.

use super::tensor::Tensor;
use crate::error::{RadaError, Result};

/// Default central-difference step for 64-bit floats.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `params`, one tensor per parameter.
pub fn numerical_gradient<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(RadaError::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(RadaError::NonFinite(format!(
                    "objective evaluated to {plus}/{minus} while perturbing parameter {p}[{i}]"
                )));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between analytic and central
/// differences: `|a − n| / (|a| + |n| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], analytic: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(RadaError::dim("finite_diff_check", &[params.len()], &[analytic.len()]));
    }
    for (p, a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(RadaError::dim("finite_diff_check", p.shape(), a.shape()));
        }
    }
    let numeric = numerical_gradient(f, params, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .fold(0.0, f64::max)
}
