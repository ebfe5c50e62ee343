//! Error metrics and log-log rate fits.

use serde::Serialize;

use crate::domain::Grid;
use crate::error::{Error, Result};
use crate::estimators::GridEstimate;
use crate::stats::{fit_loglog, mean, std_error};

use super::oracle::PopulationTarget;

/// `Σ_p w (est_p - target_p)²`.
pub fn ise(estimate: &GridEstimate, target: &[f64], grid: &Grid) -> Result<f64> {
    if estimate.grid_fingerprint != grid.fingerprint() {
        return Err(Error::GridMismatch("estimate and grid differ".into()));
    }
    if estimate.value_dim != 1 || target.len() != grid.len() || estimate.len() != grid.len() {
        return Err(Error::GridMismatch("target length differs from the grid".into()));
    }
    Ok(estimate
        .values
        .iter()
        .zip(target)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        * grid.weight)
}

fn check_matched(estimate: &GridEstimate, target: &PopulationTarget) -> Result<()> {
    if estimate.kernel_fingerprint != target.kernel_fingerprint {
        return Err(Error::MatchedTarget(format!(
            "{} estimate scored against a target built with another smoothing operator",
            estimate.estimator
        )));
    }
    Ok(())
}

/// ISE against a population target that must share the estimator's smoothing operator.
pub fn matched_ise(estimate: &GridEstimate, target: &PopulationTarget, grid: &Grid) -> Result<f64> {
    check_matched(estimate, target)?;
    ise(estimate, &target.density, grid)
}

/// ISE against a reference estimate (e.g. the IPW proxy); cross-kernel comparisons
/// are refused unless `allow_cross_kernel`.
pub fn reference_ise(estimate: &GridEstimate, reference: &GridEstimate, grid: &Grid, allow_cross_kernel: bool) -> Result<f64> {
    if !allow_cross_kernel && estimate.kernel_fingerprint != reference.kernel_fingerprint {
        return Err(Error::MatchedTarget("reference built with another smoothing operator".into()));
    }
    ise(estimate, &reference.values, grid)
}

/// Mean of `‖ŝ(y) - s(y)‖²` over the grid points flagged in `mask`.
pub fn score_mse(estimate: &GridEstimate, target: &PopulationTarget, mask: &[bool]) -> Result<f64> {
    check_matched(estimate, target)?;
    let s = target.score().ok_or_else(|| Error::Wiring("target lacks gradients".into()))?;
    let d = target.dim;
    if estimate.values.len() != s.len() || mask.len() != target.density.len() {
        return Err(Error::GridMismatch("score estimate and target differ in shape".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, keep) in mask.iter().enumerate() {
        if *keep {
            total += (0..d).map(|j| (estimate.values[p * d + j] - s[p * d + j]).powi(2)).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::config("interior", "no grid points selected"));
    }
    Ok(total / count as f64)
}

/// Error as a function of `n` with its fitted log-log slope.
#[derive(Debug, Clone, Serialize)]
pub struct RateCurve {
    pub n: Vec<usize>,
    pub error: Vec<f64>,
    /// Replication standard errors (0 when a single replication).
    pub error_se: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Least-squares slope of `log error` on `log n`.
pub fn rate_slope(n: &[usize], error: &[f64], error_se: Option<&[f64]>) -> Result<RateCurve> {
    if n.len() < 3 || n.len() != error.len() {
        return Err(Error::InsufficientScales(n.len()));
    }
    if n.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("n", "sample sizes must be strictly increasing"));
    }
    let x: Vec<f64> = n.iter().map(|v| *v as f64).collect();
    let fit = fit_loglog(&x, error)?;
    Ok(RateCurve {
        n: n.to_vec(),
        error: error.to_vec(),
        error_se: error_se.map_or_else(|| vec![0.0; n.len()], <[f64]>::to_vec),
        slope: fit.slope,
        intercept: fit.intercept,
        slope_se: fit.slope_se,
    })
}

/// Rate curve from per-`n` replication errors.
pub fn rate_from_replications(n: &[usize], errors: &[Vec<f64>]) -> Result<RateCurve> {
    let means: Vec<f64> = errors.iter().map(|e| mean(e)).collect();
    let ses: Vec<f64> = errors.iter().map(|e| std_error(e)).collect();
    rate_slope(n, &means, Some(&ses))
}
