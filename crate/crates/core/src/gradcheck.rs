//! Central finite-difference gradient verification.

use log::warn;
use serde::Serialize;

use crate::error::{GcmaeError, Result};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Step sizes below this lose more to f64 round-off than they gain.
pub const MIN_RELIABLE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Coordinates whose one-sided slopes disagree (kinks); excluded from the maximum.
    pub non_checkable: Vec<usize>,
    pub checked: usize,
    pub warnings: Vec<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` with `(f(x+ε) − f(x−ε)) / 2ε` at each coordinate in
/// `indices` (all coordinates when `None`).
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], eps: f64, indices: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(GcmaeError::shape(format!(
            "point has {} coordinates, gradient {}",
            point.len(),
            analytic.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(GcmaeError::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut report = GradCheckReport::default();
    if eps < MIN_RELIABLE_EPS {
        let msg = format!("step {eps:e} is below {MIN_RELIABLE_EPS:e}; round-off will dominate");
        warn!("{msg}");
        report.warnings.push(msg);
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(idx) => idx,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let f0 = f(&x);
    for &i in indices {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;

        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        let gap = (forward - backward).abs();
        if gap > 0.5 * forward.abs().max(backward.abs()) && gap > eps.sqrt() {
            report.non_checkable.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
