//! Geometry-drift scaling: Monte-Carlo `L2(P_a)` distance between kernels built
//! from the reference and a perturbed geometry.

use std::io::Write;

use serde::Serialize;

use crate::domain::fmt_f64;
use crate::error::{Error, Result};
use crate::kernel::SmoothingKernel;
use crate::par;
use crate::peakiness::csv_err;
use crate::plot::{loglog_svg, Series};
use crate::stats::fit_line;

/// Kernel at `(h, eps)`; `eps = 0` is the reference geometry.
pub type PerturbedFamily<'a> = dyn Fn(f64, f64) -> Result<Box<dyn SmoothingKernel>> + Sync + 'a;

/// `‖κ₁(y; ·) - κ₀(y; ·)‖_{L2(P_a)}` at each probe `y`, averaging over law samples.
pub fn kernel_drift(k0: &dyn SmoothingKernel, k1: &dyn SmoothingKernel, probes: &[f64], samples: &[f64]) -> Result<Vec<f64>> {
    let d = k0.dim();
    if k1.dim() != d || probes.len() % d != 0 || samples.is_empty() || samples.len() % d != 0 {
        return Err(Error::Wiring("drift inputs do not share one dimension".into()));
    }
    let m = samples.len() / d;
    par::try_map_indexed(probes.len() / d, |p| {
        let y = &probes[p * d..(p + 1) * d];
        let (f0, f1) = (k0.local_form(y)?, k1.local_form(y)?);
        let ss: f64 = (0..m)
            .map(|i| {
                let u = &samples[i * d..(i + 1) * d];
                (f1.eval(u) - f0.eval(u)).powi(2)
            })
            .sum();
        Ok((ss / m as f64).sqrt())
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftRow {
    pub h: f64,
    pub eps: f64,
    /// Root mean square over probes.
    pub drift: f64,
    pub drift_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftTable {
    pub rows: Vec<DriftRow>,
    /// `(eps, slope of log drift on log(1/h))`.
    pub h_slopes: Vec<(f64, f64)>,
    /// `(h, slope of log drift on log eps)`.
    pub eps_slopes: Vec<(f64, f64)>,
    /// Averages of the fitted slopes; empirical proxies for the drift exponents.
    pub h_exponent: Option<f64>,
    pub eps_exponent: Option<f64>,
}

pub fn drift_diagnostic(family: &PerturbedFamily<'_>, samples: &[f64], probes: &[f64], hs: &[f64], epss: &[f64]) -> Result<DriftTable> {
    if hs.is_empty() || epss.is_empty() {
        return Err(Error::config("h", "drift needs at least one h and one eps"));
    }
    if epss.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::config("eps", "must be nonnegative"));
    }
    let mut rows = Vec::with_capacity(hs.len() * epss.len());
    for &h in hs {
        let k0 = family(h, 0.0)?;
        for &eps in epss {
            let k1 = family(h, eps)?;
            let per = kernel_drift(k0.as_ref(), k1.as_ref(), probes, samples)?;
            let drift = (per.iter().map(|v| v * v).sum::<f64>() / per.len().max(1) as f64).sqrt();
            let drift_max = per.iter().copied().fold(0.0, f64::max);
            rows.push(DriftRow { h, eps, drift, drift_max });
        }
    }
    let at = |h: f64, e: f64| rows.iter().find(|r| r.h == h && r.eps == e).map(|r| r.drift);
    let mut h_slopes = Vec::new();
    for &e in epss.iter().filter(|e| **e > 0.0) {
        let pts: Vec<(f64, f64)> = hs.iter().filter_map(|&h| at(h, e).filter(|v| *v > 0.0).map(|v| ((1.0 / h).ln(), v.ln()))).collect();
        if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            h_slopes.push((e, fit_line(&x, &y)?.slope));
        }
    }
    let mut eps_slopes = Vec::new();
    for &h in hs {
        let pts: Vec<(f64, f64)> = epss
            .iter()
            .filter(|e| **e > 0.0)
            .filter_map(|&e| at(h, e).filter(|v| *v > 0.0).map(|v| (e.ln(), v.ln())))
            .collect();
        if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            eps_slopes.push((h, fit_line(&x, &y)?.slope));
        }
    }
    let avg = |v: &[(f64, f64)]| (!v.is_empty()).then(|| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64);
    Ok(DriftTable {
        h_exponent: avg(&h_slopes),
        eps_exponent: avg(&eps_slopes),
        rows,
        h_slopes,
        eps_slopes,
    })
}

impl DriftTable {
    /// CSV with header `h,eps,drift,drift_max`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["h", "eps", "drift", "drift_max"]).map_err(csv_err)?;
        for r in &self.rows {
            wr.write_record([fmt_f64(r.h), fmt_f64(r.eps), fmt_f64(r.drift), fmt_f64(r.drift_max)])
                .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Drift against `1/h`, one series per positive `eps`.
    pub fn to_svg(&self) -> String {
        let mut epss: Vec<f64> = self.rows.iter().map(|r| r.eps).filter(|e| *e > 0.0).collect();
        epss.sort_by(f64::total_cmp);
        epss.dedup();
        let series: Vec<Series> = epss
            .iter()
            .map(|&e| {
                let rows: Vec<&DriftRow> = self.rows.iter().filter(|r| r.eps == e).collect();
                let x: Vec<f64> = rows.iter().map(|r| 1.0 / r.h).collect();
                let y: Vec<f64> = rows.iter().map(|r| r.drift).collect();
                let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
                let ly: Vec<f64> = y.iter().map(|v| v.max(1e-300).ln()).collect();
                Series {
                    label: format!("eps {e}"),
                    fit: fit_line(&lx, &ly).ok().map(|f| (f.slope, f.intercept)),
                    x,
                    y,
                }
            })
            .collect();
        loglog_svg("Geometry drift", "1/h", "L2 drift", &series)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AnisoKernel, IsoKernel};
    use crate::rng::SeedPolicy;
    use crate::score::GaussianMixtureLaw;
    use nalgebra::DMatrix;

    #[test]
    fn bandwidth_perturbation_scales_as_gaussian_oracle() {
        // iso kernel with h(1+eps): drift ∝ eps h^{-d/2} on diffuse data
        let fam = |h: f64, eps: f64| -> Result<Box<dyn SmoothingKernel>> {
            if eps == 0.0 {
                Ok(Box::new(IsoKernel::new(2, h)?))
            } else {
                let s = h * (1.0 + eps);
                Ok(Box::new(AnisoKernel::new(DMatrix::identity(2, 2) * (s * s), h)?))
            }
        };
        let law = GaussianMixtureLaw::standard_normal(2);
        let samples = law.sample(40_000, &mut SeedPolicy::new(1).stream("drift")).unwrap();
        let probes = vec![0.0, 0.0, 0.3, -0.2, -0.4, 0.1];
        let t = drift_diagnostic(&fam, &samples, &probes, &[0.1, 0.15, 0.2, 0.3], &[0.0, 0.02, 0.05, 0.1]).unwrap();
        assert!(t.rows.iter().filter(|r| r.eps == 0.0).all(|r| r.drift == 0.0));
        assert!((t.eps_exponent.unwrap() - 1.0).abs() < 0.15, "{t:?}");
        assert!((t.h_exponent.unwrap() - 1.0).abs() < 0.3, "{t:?}");
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("h,eps,drift,drift_max\n"));
        assert!(t.to_svg().contains("<svg"));
    }
}
