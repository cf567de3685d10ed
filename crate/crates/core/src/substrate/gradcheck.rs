//! Central-difference verification of analytic gradients.

use crate::error::{CloverError, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`
    pub max_rel_error: f64,
    /// Coordinate at which the maximum was attained.
    pub worst_coord: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error used throughout: absolute error below unit gradient magnitude.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks `grad` (the analytic gradient of `f` at `point`) against central differences
/// on every coordinate.
pub fn grad_check<F>(f: F, point: &[f64], grad: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, grad, h, &coords)
}

/// As [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_coords<F>(
    mut f: F,
    point: &[f64],
    grad: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if grad.len() != point.len() {
        return Err(CloverError::Shape(format!(
            "gradient has {} entries for a {}-dimensional point",
            grad.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        coords_checked: 0,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(CloverError::NonFinite(format!(
                "function value at coordinate {i} ± h is not finite ({up}, {down})"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let err = rel_error(grad[i], numeric);
        if !err.is_finite() {
            return Err(CloverError::NonFinite(format!(
                "analytic gradient at coordinate {i} is not finite"
            )));
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}
