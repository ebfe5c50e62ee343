//! Kernel peakiness `H_h = E∫κ(y;Y)²dy`, its score analogue, and the
//! effective dimensions they define.

use std::io::Write;

use serde::Serialize;

use crate::domain::Grid;
use crate::error::{Error, Result};
use crate::kernel::{GridKernel, SmoothingKernel};
use crate::par;
use crate::plot::{loglog_svg, Series};
use crate::stats::fit_line;

/// Builds the kernel at scale `h`.
pub type KernelFamily<'a> = dyn Fn(f64) -> Result<Box<dyn SmoothingKernel>> + Sync + 'a;

#[derive(Debug, Clone, Serialize)]
pub struct PeakinessReport {
    pub h: Vec<f64>,
    #[serde(rename = "H")]
    pub peakiness: Vec<f64>,
    #[serde(rename = "Hs")]
    pub score_peakiness: Option<Vec<f64>>,
    pub d_eff: Vec<f64>,
    pub ds_eff: Option<Vec<f64>>,
    /// Least-squares slope of `log H` on `log(1/h)`.
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub score_slope: Option<f64>,
}

/// `log(max(H, 1)) / log(1/h)` for `0 < h < 1`.
pub fn effective_dimension(big_h: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::config("h", "effective dimension needs 0 < h < 1"));
    }
    Ok(big_h.max(1.0).ln() / (1.0 / h).ln())
}

/// Peakiness over the grid region, averaging grid quadrature of `κ(y; Y_i)²`
/// (plus `‖∇_y κ‖²` when `include_score`) over the rows of `samples`.
pub fn peakiness(
    family: &KernelFamily<'_>,
    hs: &[f64],
    samples: &[f64],
    grid: &Grid,
    include_score: bool,
) -> Result<PeakinessReport> {
    let mut distinct = hs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientScales(distinct.len()));
    }
    let d = grid.dim;
    if samples.is_empty() || samples.len() % d != 0 {
        return Err(Error::Data("samples must be a nonempty row-major matrix in grid coordinates".into()));
    }
    let m = samples.len() / d;
    let mut big_h = Vec::with_capacity(hs.len());
    let mut big_hs = Vec::with_capacity(hs.len());
    for &h in hs {
        let kernel = family(h)?;
        let gk = GridKernel::build(kernel.as_ref(), grid, include_score)?;
        let per_sample = par::map_indexed(m, |i| {
            let u = &samples[i * d..(i + 1) * d];
            let mut g = vec![0.0; d];
            let (mut a, mut b) = (0.0, 0.0);
            for p in 0..gk.len() {
                let k = if include_score { gk.grad(p, u, &mut g) } else { gk.eval(p, u) };
                a += k * k;
                if include_score {
                    b += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
            (a * grid.weight, b * grid.weight)
        });
        let (sa, sb) = per_sample.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        big_h.push(sa / m as f64);
        big_hs.push((sa + sb) / m as f64);
    }
    PeakinessReport::from_values(hs.to_vec(), big_h, include_score.then_some(big_hs))
}

impl PeakinessReport {
    pub fn from_values(h: Vec<f64>, big_h: Vec<f64>, big_hs: Option<Vec<f64>>) -> Result<Self> {
        let d_eff = h.iter().zip(&big_h).map(|(h, v)| effective_dimension(*v, *h)).collect::<Result<Vec<_>>>()?;
        let x: Vec<f64> = h.iter().map(|v| (1.0 / v).ln()).collect();
        let log = |v: &[f64]| -> Result<Vec<f64>> {
            v.iter()
                .map(|x| {
                    if *x > 0.0 {
                        Ok(x.ln())
                    } else {
                        Err(Error::LogDomain(format!("peakiness {x} is not positive")))
                    }
                })
                .collect()
        };
        let fit = fit_line(&x, &log(&big_h)?)?;
        let (ds_eff, score_slope) = match &big_hs {
            Some(s) => (
                Some(h.iter().zip(s).map(|(h, v)| effective_dimension(*v, *h)).collect::<Result<Vec<_>>>()?),
                Some(fit_line(&x, &log(s)?)?.slope),
            ),
            None => (None, None),
        };
        Ok(Self {
            h,
            peakiness: big_h,
            score_peakiness: big_hs,
            d_eff,
            ds_eff,
            slope: fit.slope,
            slope_se: fit.slope_se,
            intercept: fit.intercept,
            score_slope,
        })
    }

    /// CSV with header `h,H,Hs,d_eff` (`Hs` empty when not computed).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["h", "H", "Hs", "d_eff"]).map_err(csv_err)?;
        for i in 0..self.h.len() {
            let hs = self
                .score_peakiness
                .as_ref()
                .map(|v| format!("{:?}", v[i]))
                .unwrap_or_default();
            wr.write_record([
                format!("{:?}", self.h[i]),
                format!("{:?}", self.peakiness[i]),
                hs,
                format!("{:?}", self.d_eff[i]),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Log-log plot of `H` (and `Hs`) against `1/h` with the fitted lines.
    pub fn to_svg(&self) -> String {
        let x: Vec<f64> = self.h.iter().map(|v| 1.0 / v).collect();
        let mut series = vec![Series {
            label: "H".into(),
            x: x.clone(),
            y: self.peakiness.clone(),
            fit: Some((self.slope, self.intercept)),
        }];
        if let Some(s) = &self.score_peakiness {
            let ly: Vec<f64> = s.iter().map(|v| v.ln()).collect();
            let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
            let fit = fit_line(&lx, &ly).ok().map(|f| (f.slope, f.intercept));
            series.push(Series {
                label: "Hs".into(),
                x,
                y: s.clone(),
                fit,
            });
        }
        loglog_svg("Kernel peakiness", "1/h", "H", &series)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_grid, EvaluationRegion};
    use crate::kernel::{AnisoKernel, IsoKernel};
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    #[test]
    fn aniso_closed_form_slope() {
        let grid = make_grid(&EvaluationRegion::new(vec![-5.0, -5.0], vec![5.0, 5.0], 400).unwrap()).unwrap();
        let samples = vec![0.0, 0.0, 0.3, -0.2];
        let fam = |h: f64| -> Result<Box<dyn SmoothingKernel>> {
            Ok(Box::new(AnisoKernel::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![h * h, 1.0])), h)?))
        };
        let hs = [0.1, 0.2, 0.4];
        let r = peakiness(&fam, &hs, &samples, &grid, false).unwrap();
        for (h, v) in hs.iter().zip(&r.peakiness) {
            let want = 1.0 / (4.0 * PI * h);
            assert!((v / want - 1.0).abs() < 1e-6, "{v} {want}");
        }
        assert!((r.slope - 1.0).abs() < 1e-5);
        let iso = |h: f64| -> Result<Box<dyn SmoothingKernel>> { Ok(Box::new(IsoKernel::new(2, h)?)) };
        let r = peakiness(&iso, &hs, &samples, &grid, true).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-5);
        assert!(r.score_peakiness.as_ref().unwrap().iter().zip(&r.peakiness).all(|(a, b)| a > b));
        assert!(matches!(peakiness(&iso, &[0.1, 0.1], &samples, &grid, false), Err(Error::InsufficientScales(1))));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("h,H,Hs,d_eff\n"));
    }

    #[test]
    fn d_eff_definition() {
        assert_eq!(effective_dimension(0.5, 0.1).unwrap(), 0.0);
        assert!((effective_dimension(100.0, 0.1).unwrap() - 2.0).abs() < 1e-12);
        assert!(effective_dimension(2.0, 1.0).is_err());
    }
}
