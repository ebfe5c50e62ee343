//! Small dense helpers for Gaussian densities in low dimension.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !m.is_square() {
        return Err(Error::Decomposition("matrix is not square".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let chol = sym
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Decomposition("matrix is not positive definite".into()))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(Error::Decomposition("log-determinant is not finite".into()));
    }
    Ok((chol.inverse(), logdet))
}

pub fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigen(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    PI.powf(h) / gamma_half_integer(h + 1.0)
}

// Gamma at positive integers and half-integers.
fn gamma_half_integer(x: f64) -> f64 {
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as usize).map(|k| k as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut z = 0.5;
        while z < x - 1e-12 {
            g *= z;
            z += 1.0;
        }
        g
    }
}

/// A multivariate normal density stored as flattened precision for allocation-free
/// evaluation in the hot loops.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    prec: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Decomposition(format!("covariance is not {d}×{d}")));
        }
        let (inv, logdet) = spd_inverse(&cov)?;
        let prec = (0..d * d).map(|k| inv[(k / d, k % d)]).collect();
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + logdet);
        Ok(Self {
            mean,
            cov,
            prec,
            log_norm,
        })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn precision(&self) -> &[f64] {
        &self.prec
    }

    #[inline]
    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        let d = self.mean.len();
        if d > 16 {
            let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            return self.log_norm - 0.5 * quad(&self.prec, &diff);
        }
        let mut buf = [0.0f64; 16];
        let diff = &mut buf[..d];
        for j in 0..d {
            diff[j] = z[j] - self.mean[j];
        }
        self.log_norm - 0.5 * quad(&self.prec, diff)
    }

    pub fn pdf(&self, z: &[f64]) -> f64 {
        self.log_pdf(z).exp()
    }

    /// `∇_z log N(z; m, Σ) = -Σ⁻¹ (z - m)`.
    pub fn grad_log(&self, z: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.prec[i * d + j] * (z[j] - self.mean[j]);
            }
            out[i] = -s;
        }
    }

    pub fn precision_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.prec)
    }
}

#[inline]
pub(crate) fn quad(prec: &[f64], diff: &[f64]) -> f64 {
    let d = diff.len();
    let mut q = 0.0;
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += prec[i * d + j] * diff[j];
        }
        q += diff[i] * s;
    }
    q
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Sample mean and unbiased covariance of row-major samples.
pub fn mean_cov(samples: &[f64], d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = samples.len() / d;
    let mut mean = vec![0.0; d];
    for row in samples.chunks(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for row in samples.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    (mean, cov / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-12);
        assert!((unit_ball_volume(2) - PI).abs() < 1e-12);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_peak() {
        let g = Gaussian::isotropic(vec![0.0], 1.0).unwrap();
        assert!((g.pdf(&[0.0]) - 0.398_942_280_401_432_7).abs() < 1e-12);
    }

    #[test]
    fn non_spd_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Gaussian::new(vec![0.0, 0.0], m), Err(Error::Decomposition(_))));
    }

    #[test]
    fn lse_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
