//! Multiplier-bootstrap simultaneous bands for grid densities and Stein
//! functionals, plus envelope inflation.

use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::domain::fmt_f64;
use crate::error::{Error, Result};
use crate::estimators::{GridEstimate, SteinEstimate};
use crate::par;
use crate::peakiness::csv_err;
use crate::rng::SeedPolicy;

pub const DEFAULT_MULTIPLIERS: usize = 1000;

/// Replications per multiplier block; fixed so results never depend on the pool size.
const BLOCK: usize = 50;

#[derive(Debug, Clone, Serialize)]
pub struct BandResult {
    /// Grid point indices or test-field ids.
    pub index: Vec<String>,
    pub center: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c_hat: f64,
    /// `ĉ σ̂ / √n + Δ̂` per point.
    pub radius: Vec<f64>,
    pub alpha: f64,
    #[serde(rename = "B")]
    pub multipliers: usize,
    pub n: usize,
    /// Inflation envelope `Δ̂` already included in `radius`.
    pub envelope: f64,
}

impl BandResult {
    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().zip(&self.radius).map(|(c, r)| c - r).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center.iter().zip(&self.radius).map(|(c, r)| c + r).collect()
    }

    /// True when `target` lies inside the band at every point.
    pub fn covers(&self, target: &[f64]) -> Result<bool> {
        if target.len() != self.center.len() {
            return Err(Error::GridMismatch(format!(
                "target has {} points, band has {}",
                target.len(),
                self.center.len()
            )));
        }
        Ok(self
            .center
            .iter()
            .zip(&self.radius)
            .zip(target)
            .all(|((c, r), t)| (c - t).abs() <= *r))
    }

    /// CSV with header `point_id,center,sigma,radius,lower,upper`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["point_id", "center", "sigma", "radius", "lower", "upper"]).map_err(csv_err)?;
        for p in 0..self.center.len() {
            wr.write_record([
                self.index[p].clone(),
                fmt_f64(self.center[p]),
                fmt_f64(self.sigma[p]),
                fmt_f64(self.radius[p]),
                fmt_f64(self.center[p] - self.radius[p]),
                fmt_f64(self.center[p] + self.radius[p]),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Summary JSON with keys `alpha`, `B`, `c_hat`, `envelope`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "alpha": self.alpha,
            "B": self.multipliers,
            "c_hat": self.c_hat,
            "envelope": self.envelope,
        })
    }
}

/// Critical value of `sup_p |Ẑ(p)| / σ̂(p)` from `B` Gaussian multiplier draws.
///
/// `influence` is row-major `[p][i]`, centred per point. Multiplier vector `b`
/// comes from its own substream, so draws depend only on `(seed, b, n)`.
pub fn multiplier_band(
    influence: &[f64],
    n: usize,
    center: &[f64],
    index: Vec<String>,
    alpha: f64,
    multipliers: usize,
    seed: &SeedPolicy,
) -> Result<BandResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha", "must lie in (0, 1)"));
    }
    if multipliers == 0 {
        return Err(Error::config("B", "needs at least one multiplier draw"));
    }
    let len = center.len();
    if n == 0 || influence.len() != len * n || index.len() != len {
        return Err(Error::Wiring("influence matrix does not match the index set".into()));
    }
    let mut sigma = Vec::with_capacity(len);
    for p in 0..len {
        let row = &influence[p * n..(p + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if mean.abs() > 1e-10 * (1.0 + scale) {
            return Err(Error::NotCentered { point: p, mean });
        }
        sigma.push((row.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt());
    }
    let max_sigma = sigma.iter().copied().fold(0.0, f64::max);
    let floor = 1e-12 + 1e-6 * max_sigma;
    if let Some((p, s)) = sigma.iter().enumerate().find(|(_, s)| **s < floor) {
        return Err(Error::DegenerateVariance { point: p, sigma: *s, floor });
    }

    // studentised rows so that Φ ξ gives the studentised process directly
    let scaled = DMatrix::from_fn(len, n, |p, i| influence[p * n + i] / (sigma[p] * (n as f64).sqrt()));
    let blocks = multipliers.div_ceil(BLOCK);
    let sups: Vec<Vec<f64>> = par::map_indexed(blocks, |blk| {
        let lo = blk * BLOCK;
        let hi = (lo + BLOCK).min(multipliers);
        let mut xi = DMatrix::<f64>::zeros(n, hi - lo);
        for b in lo..hi {
            let mut rng = seed.indexed("multipliers", b as u64);
            for i in 0..n {
                xi[(i, b - lo)] = StandardNormal.sample(&mut rng);
            }
        }
        let z = &scaled * xi;
        z.column_iter().map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect()
    });
    let mut stats: Vec<f64> = sups.into_iter().flatten().collect();
    stats.sort_by(f64::total_cmp);
    let c_hat = stats[order_index(alpha, multipliers)];
    let radius = sigma.iter().map(|s| c_hat * s / (n as f64).sqrt()).collect();
    Ok(BandResult {
        index,
        center: center.to_vec(),
        sigma,
        c_hat,
        radius,
        alpha,
        multipliers,
        n,
        envelope: 0.0,
    })
}

/// `⌈(1-α)(B+1)⌉ - 1`, clamped to the last order statistic.
fn order_index(alpha: f64, b: usize) -> usize {
    let k = ((1.0 - alpha) * (b as f64 + 1.0)).ceil() as usize;
    k.saturating_sub(1).min(b - 1)
}

/// Band for a grid estimate that kept its influence matrix.
pub fn density_band(est: &GridEstimate, alpha: f64, multipliers: usize, seed: &SeedPolicy) -> Result<BandResult> {
    let inf = est
        .influence
        .as_ref()
        .ok_or_else(|| Error::Wiring("estimate was computed without keep_influence".into()))?;
    if est.value_dim != 1 {
        return Err(Error::Wiring("bands are defined for scalar estimates".into()));
    }
    multiplier_band(
        inf,
        est.n,
        &est.values,
        (0..est.len()).map(|p| p.to_string()).collect(),
        alpha,
        multipliers,
        seed,
    )
}

/// Simultaneous band over the test class.
pub fn stein_band(estimates: &[SteinEstimate], alpha: f64, multipliers: usize, seed: &SeedPolicy) -> Result<BandResult> {
    let n = estimates.first().map(|e| e.n).ok_or_else(|| Error::config("fields", "empty test class"))?;
    if estimates.iter().any(|e| e.n != n || e.influence.len() != n) {
        return Err(Error::Wiring("Stein estimates come from different samples".into()));
    }
    let inf: Vec<f64> = estimates.iter().flat_map(|e| e.influence.iter().copied()).collect();
    let center: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    multiplier_band(
        &inf,
        n,
        &center,
        estimates.iter().map(|e| e.field_id.clone()).collect(),
        alpha,
        multipliers,
        seed,
    )
}

/// Adds `envelope` to every radius.
pub fn inflate_band(band: &BandResult, envelope: f64) -> Result<BandResult> {
    if !(envelope >= 0.0) || !envelope.is_finite() {
        return Err(Error::config("envelope", "must be a finite nonnegative number"));
    }
    let mut out = band.clone();
    out.radius.iter_mut().for_each(|r| *r += envelope);
    out.envelope += envelope;
    Ok(out)
}
