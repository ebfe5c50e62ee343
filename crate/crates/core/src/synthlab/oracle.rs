//! Population targets for kernels whose local forms are Gaussian in the anchor.
//!
//! For a form `κ(y; u) = e^{log_j} N(t; αu, S)` and outcome law
//! `Σ_j w_j N(m_j + B_j x, C_j)`, the conditional mean is
//! `e^{log_j} Σ_j w_j N(t; α(m_j + B_j x), α² C_j + S)`, exactly.

use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;

use crate::domain::Grid;
use crate::error::{Error, Result};
use crate::estimators::TestField;
use crate::kernel::{GradForm, GridKernel, LocalForm, SmoothingKernel, MAX_KERNEL_DIM};
use crate::linalg::spd_inverse;
use crate::nuisance::ConditionalMean;
use crate::score::GaussianMixtureLaw;

use super::dgp::{ConditionalLaw, SyntheticDgp};

#[derive(Debug, Clone)]
struct Component {
    log_c: f64,
    /// `α m_j`.
    center: Vec<f64>,
    /// `α B_j`, row-major `r × k`.
    loading: Vec<f64>,
    prec: Vec<f64>,
}

/// Closed-form conditional mean of one local form.
#[derive(Debug, Clone)]
pub struct FormMixture {
    log_j: f64,
    t: Vec<f64>,
    k: usize,
    comps: Vec<Component>,
}

impl FormMixture {
    pub fn new(form: &LocalForm, law: &ConditionalLaw) -> Result<Self> {
        let r = form.dim();
        let a = form.alpha;
        let k = law.loadings.first().map_or(0, |b| b.ncols());
        let mut comps = Vec::with_capacity(law.weights.len());
        for j in 0..law.weights.len() {
            if law.means[j].len() != r || law.covs[j].nrows() != r {
                return Err(Error::Wiring("law and kernel dimensions differ".into()));
            }
            let v = &law.covs[j] * (a * a) + &form.cov;
            let (inv, logdet) = spd_inverse(&v)?;
            let b = &law.loadings[j];
            comps.push(Component {
                log_c: law.weights[j].ln() - 0.5 * (r as f64 * (2.0 * PI).ln() + logdet),
                center: law.means[j].iter().map(|m| a * m).collect(),
                loading: (0..r * k).map(|q| a * b[(q / k, q % k)]).collect(),
                prec: (0..r * r).map(|q| inv[(q / r, q % r)]).collect(),
            });
        }
        Ok(Self {
            log_j: form.log_j,
            t: form.t.clone(),
            k,
            comps,
        })
    }

    #[inline]
    fn diff(&self, c: &Component, x: &[f64], out: &mut [f64]) {
        let r = self.t.len();
        for i in 0..r {
            let mut m = c.center[i];
            for q in 0..self.k {
                m += c.loading[i * self.k + q] * x[q];
            }
            out[i] = self.t[i] - m;
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r = self.t.len();
        let mut diff = [0.0f64; MAX_KERNEL_DIM];
        let mut total = 0.0;
        for c in &self.comps {
            self.diff(c, x, &mut diff[..r]);
            total += (c.log_c - 0.5 * crate::linalg::quad(&c.prec, &diff[..r])).exp();
        }
        total * self.log_j.exp()
    }

    /// Value and its gradient in `t`.
    #[inline]
    pub fn eval_with_tgrad(&self, x: &[f64], tgrad: &mut [f64]) -> f64 {
        let r = self.t.len();
        let mut diff = [0.0f64; MAX_KERNEL_DIM];
        let scale = self.log_j.exp();
        tgrad.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for c in &self.comps {
            self.diff(c, x, &mut diff[..r]);
            let mut q = 0.0;
            let mut pd = [0.0f64; MAX_KERNEL_DIM];
            for i in 0..r {
                let mut s = 0.0;
                for j in 0..r {
                    s += c.prec[i * r + j] * diff[j];
                }
                pd[i] = s;
                q += diff[i] * s;
            }
            let v = scale * (c.log_c - 0.5 * q).exp();
            total += v;
            for i in 0..r {
                tgrad[i] -= v * pd[i];
            }
        }
        total
    }
}

#[derive(Debug, Clone)]
enum GradOracle {
    Analytic { jac_t: Vec<f64> },
    FiniteDiff { plus: Vec<FormMixture>, minus: Vec<FormMixture>, delta: f64 },
}

/// Closed-form `E{κ(y_p; Y) | X = x}` (and its `y`-gradient) on every grid point.
#[derive(Debug, Clone)]
pub struct KernelOracle {
    kernel_fp: String,
    grid_fp: String,
    dim: usize,
    k: usize,
    main: Vec<FormMixture>,
    grads: Option<Vec<GradOracle>>,
}

impl KernelOracle {
    pub fn build(gk: &GridKernel, law: &ConditionalLaw) -> Result<Self> {
        let main = crate::par::try_map_indexed(gk.len(), |p| FormMixture::new(gk.form(p), law))?;
        let grads = if gk.has_grad() {
            Some(crate::par::try_map_indexed::<_, Error, _>(gk.len(), |p| {
                Ok(match gk.grad_form(p).expect("has_grad") {
                    GradForm::Analytic { jac_t } => GradOracle::Analytic { jac_t: jac_t.clone() },
                    GradForm::FiniteDiff { plus, minus, delta } => GradOracle::FiniteDiff {
                        plus: plus.iter().map(|f| FormMixture::new(f, law)).collect::<Result<_>>()?,
                        minus: minus.iter().map(|f| FormMixture::new(f, law)).collect::<Result<_>>()?,
                        delta: *delta,
                    },
                })
            })?)
        } else {
            None
        };
        Ok(Self {
            kernel_fp: gk.kernel_fingerprint().to_string(),
            grid_fp: gk.grid_fingerprint().to_string(),
            dim: gk.dim(),
            k: law.loadings.first().map_or(0, |b| b.ncols()),
            main,
            grads,
        })
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn value(&self, p: usize, x: &[f64]) -> f64 {
        self.main[p].eval(x)
    }

    /// Writes the `y`-gradient and returns the value.
    #[inline]
    pub fn gradient(&self, p: usize, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        match &self.grads.as_ref().expect("oracle built without gradients")[p] {
            GradOracle::Analytic { jac_t } => {
                let mut tg = [0.0f64; MAX_KERNEL_DIM];
                let v = self.main[p].eval_with_tgrad(x, &mut tg[..d]);
                for j in 0..d {
                    out[j] = (0..d).map(|i| jac_t[i * d + j] * tg[i]).sum();
                }
                v
            }
            GradOracle::FiniteDiff { plus, minus, delta } => {
                for j in 0..d {
                    out[j] = (plus[j].eval(x) - minus[j].eval(x)) / (2.0 * delta);
                }
                self.main[p].eval(x)
            }
        }
    }
}

impl ConditionalMean for KernelOracle {
    fn mu(&self, x: &[f64], p: usize) -> f64 {
        self.value(p, x)
    }
    fn nu(&self, x: &[f64], p: usize, out: &mut [f64]) {
        self.gradient(p, x, out);
    }
    fn has_grad(&self) -> bool {
        self.grads.is_some()
    }
    fn kernel_fingerprint(&self) -> &str {
        &self.kernel_fp
    }
    fn grid_fingerprint(&self) -> &str {
        &self.grid_fp
    }
}

/// Population smoothed density (and gradient) on a grid, tagged with its smoothing operator.
#[derive(Debug, Clone, Serialize)]
pub struct PopulationTarget {
    pub kernel_fingerprint: String,
    pub grid_fingerprint: String,
    pub dim: usize,
    pub density: Vec<f64>,
    /// `len × dim`.
    pub gradient: Option<Vec<f64>>,
}

impl PopulationTarget {
    pub fn from_law(gk: &GridKernel, law: &ConditionalLaw) -> Result<Self> {
        let oracle = KernelOracle::build(gk, &law.marginal())?;
        let d = gk.dim();
        let density = (0..gk.len()).map(|p| oracle.value(p, &[])).collect();
        let gradient = gk.has_grad().then(|| {
            let mut g = vec![0.0; gk.len() * d];
            for p in 0..gk.len() {
                oracle.gradient(p, &[], &mut g[p * d..(p + 1) * d]);
            }
            g
        });
        Ok(Self {
            kernel_fingerprint: gk.kernel_fingerprint().to_string(),
            grid_fingerprint: gk.grid_fingerprint().to_string(),
            dim: d,
            density,
            gradient,
        })
    }

    /// Smoothed score `g / p`, row-major.
    pub fn score(&self) -> Option<Vec<f64>> {
        let g = self.gradient.as_ref()?;
        let d = self.dim;
        Some(
            (0..self.density.len() * d)
                .map(|q| g[q] / self.density[q / d])
                .collect(),
        )
    }

    /// `Ψ(g) = Σ_p w {(∇·g) P + gᵀ G}` for each field.
    pub fn stein(&self, grid: &Grid, fields: &[TestField]) -> Result<Vec<f64>> {
        if grid.fingerprint() != self.grid_fingerprint {
            return Err(Error::GridMismatch("target grid".into()));
        }
        let g = self
            .gradient
            .as_ref()
            .ok_or_else(|| Error::Wiring("target computed without gradients".into()))?;
        let d = self.dim;
        let mut out = vec![0.0; fields.len()];
        let mut gv = vec![0.0; d];
        for p in 0..grid.len() {
            for (f, field) in fields.iter().enumerate() {
                let div = field.eval(grid.point(p), &mut gv);
                let mut v = div * self.density[p];
                for j in 0..d {
                    v += gv[j] * g[p * d + j];
                }
                out[f] += grid.weight * v;
            }
        }
        Ok(out)
    }
}

/// `p_{a,h}` and `∇p_{a,h}` on the grid of `gk`.
pub fn population_density(dgp: &SyntheticDgp, arm: i64, gk: &GridKernel) -> Result<PopulationTarget> {
    PopulationTarget::from_law(gk, &dgp.eval_conditional(arm)?)
}

/// Population smoothed score `s_{a,h} = ∇p / p` on the grid of `gk` (requires gradients).
pub fn population_score(dgp: &SyntheticDgp, arm: i64, gk: &GridKernel) -> Result<Vec<f64>> {
    if !gk.has_grad() {
        return Err(Error::Wiring("score target needs a kernel cache with gradients".into()));
    }
    Ok(population_density(dgp, arm, gk)?.score().expect("gradients present"))
}

/// Exact oracle for `μ(x; y_p)` and `ν(x; y_p)`.
pub fn conditional_mean_oracle(dgp: &SyntheticDgp, arm: i64, gk: &GridKernel) -> Result<KernelOracle> {
    KernelOracle::build(gk, &dgp.eval_conditional(arm)?)
}

/// `∫ κ(y; u) p(u) du` by midpoint quadrature with doubling until successive values
/// agree within `tol`; returns the value and the last difference. Only `d ≤ 2`.
pub fn quadrature_density(law: &GaussianMixtureLaw, kernel: &dyn SmoothingKernel, y: &[f64], tol: f64) -> Result<(f64, f64)> {
    let d = law.dim();
    if d > 2 {
        return Err(Error::OracleUnavailable(format!("quadrature in {d} dimensions")));
    }
    let form = kernel.local_form(y)?;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for j in 0..law.len() {
        let c = law.cov(j);
        for i in 0..d {
            let s = 9.0 * c[(i, i)].sqrt();
            lo[i] = lo[i].min(law.means[j][i] - s);
            hi[i] = hi[i].max(law.means[j][i] + s);
        }
    }
    let comps = law.components()?;
    let integrand = |u: &[f64]| -> f64 { form.eval(u) * comps.iter().map(|(w, g)| w * g.pdf(u)).sum::<f64>() };
    let rule = |m: usize| -> f64 {
        let w: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]) / m as f64).collect();
        let cell: f64 = w.iter().product();
        let mut total = 0.0;
        let mut u = vec![0.0; d];
        let count = m.pow(d as u32);
        for q in 0..count {
            let mut rem = q;
            for i in 0..d {
                u[i] = lo[i] + (rem % m) as f64 * w[i] + 0.5 * w[i];
                rem /= m;
            }
            total += integrand(&u);
        }
        total * cell
    };
    let max_m = if d == 1 { 1 << 16 } else { 1 << 10 };
    let mut m = 64;
    let mut prev = rule(m);
    loop {
        m *= 2;
        let cur = rule(m);
        let err = (cur - prev).abs();
        if err <= tol {
            return Ok((cur, err));
        }
        if m >= max_m {
            return Err(Error::OracleUnavailable(format!("quadrature did not reach {tol:e} (last change {err:e})")));
        }
        prev = cur;
    }
}

/// Monte-Carlo `E{κ(y; Y) | X = x, A = arm}` with its standard error.
pub fn mc_conditional_mean<R: Rng + ?Sized>(
    dgp: &SyntheticDgp,
    arm: i64,
    form: &LocalForm,
    x: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if draws < 2 {
        return Err(Error::config("draws", "need at least two draws"));
    }
    let p = dgp.projection_matrix();
    let law = dgp.conditional_law(arm, x)?.affine_image(&p, &vec![0.0; p.nrows()])?;
    let ys = law.sample(draws, rng)?;
    let r = law.dim();
    let vals: Vec<f64> = (0..draws).map(|i| form.eval(&ys[i * r..(i + 1) * r])).collect();
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    Ok((mean, (var / draws as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ForwardDiffusionSpec;
    use crate::domain::{make_grid, EvaluationRegion};
    use crate::kernel::{GradientMode, IsoKernel, TransportedKernel};
    use crate::rng::SeedPolicy;
    use crate::score::MixtureScore;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn small_grid() -> Grid {
        make_grid(&EvaluationRegion::new(vec![-2.0, -2.0], vec![2.0, 2.0], 7).unwrap()).unwrap()
    }

    #[test]
    fn gaussian_convolution_identity() {
        let law = GaussianMixtureLaw::gaussian(vec![0.3, -0.1], DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4])).unwrap();
        let k = IsoKernel::new(2, 0.3).unwrap();
        let grid = small_grid();
        let gk = GridKernel::build(&k, &grid, true).unwrap();
        let t = PopulationTarget::from_law(&gk, &ConditionalLaw::from_law(&law)).unwrap();
        let conv = law.convolve(&(DMatrix::identity(2, 2) * 0.09)).unwrap();
        for p in 0..grid.len() {
            assert!((t.density[p] - conv.density(grid.point(p)).unwrap()).abs() < 1e-13);
        }
        let score = t.score().unwrap();
        let s = crate::score::mixture_score(&conv, grid.point(10)).unwrap();
        assert!((score[20] - s[0]).abs() < 1e-10 && (score[21] - s[1]).abs() < 1e-10);
    }

    #[test]
    fn quadrature_agrees_with_closed_form() {
        let law = GaussianMixtureLaw::new(
            vec![0.4, 0.6],
            vec![vec![-1.0], vec![1.0]],
            vec![DMatrix::from_element(1, 1, 0.3), DMatrix::from_element(1, 1, 0.5)],
        )
        .unwrap();
        let spec = ForwardDiffusionSpec::default();
        let k = TransportedKernel::new(spec, Arc::new(MixtureScore::new(law.clone(), spec).unwrap()), 0.3).unwrap();
        let grid = make_grid(&EvaluationRegion::new(vec![-2.0], vec![2.0], 5).unwrap()).unwrap();
        let gk = GridKernel::build(&k, &grid, false).unwrap();
        let t = PopulationTarget::from_law(&gk, &ConditionalLaw::from_law(&law)).unwrap();
        for p in 0..grid.len() {
            let (q, _) = quadrature_density(&law, &k, grid.point(p), 1e-7).unwrap();
            assert!((q - t.density[p]).abs() < 1e-5, "{q} {}", t.density[p]);
        }
        assert!(matches!(
            quadrature_density(&GaussianMixtureLaw::standard_normal(3), &IsoKernel::new(3, 0.2).unwrap(), &[0.0; 3], 1e-5),
            Err(Error::OracleUnavailable(_))
        ));
    }

    #[test]
    fn point_mass_and_mode() {
        // a nearly degenerate law reproduces the kernel itself
        let law = GaussianMixtureLaw::gaussian(vec![0.2, 0.1], DMatrix::identity(2, 2) * 1e-14).unwrap();
        let k = IsoKernel::new(2, 0.5).unwrap();
        let grid = small_grid();
        let gk = GridKernel::build(&k, &grid, true).unwrap();
        let t = PopulationTarget::from_law(&gk, &ConditionalLaw::from_law(&law)).unwrap();
        for p in 0..grid.len() {
            assert!((t.density[p] - gk.eval(p, &[0.2, 0.1])).abs() < 1e-10);
        }
        // symmetric law: score vanishes at the centre point of an odd grid
        let sym = GaussianMixtureLaw::standard_normal(2);
        let t = PopulationTarget::from_law(&gk, &ConditionalLaw::from_law(&sym)).unwrap();
        let s = t.score().unwrap();
        assert!(s[48].abs() < 1e-12 && s[49].abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_monte_carlo_and_fd_gradient() {
        let dgp = SyntheticDgp::preset("mix2d").unwrap();
        let spec = ForwardDiffusionSpec::default();
        let geom = Arc::new(MixtureScore::new(dgp.eval_counterfactual_law(1).unwrap(), spec).unwrap());
        let k = TransportedKernel::new(spec, geom, 0.4).unwrap().with_gradient_mode(GradientMode::FiniteDiff);
        let grid = small_grid();
        let gk = GridKernel::build(&k, &grid, true).unwrap();
        let oracle = conditional_mean_oracle(&dgp, 1, &gk).unwrap();
        let x = [0.7, -0.4];
        let p = 24;
        let (mc, se) = mc_conditional_mean(&dgp, 1, gk.form(p), &x, 20_000, &mut SeedPolicy::new(2).stream("mc")).unwrap();
        assert!((mc - oracle.mu(&x, p)).abs() < 4.0 * se, "{mc} {} {se}", oracle.mu(&x, p));
        let mut g = [0.0; 2];
        oracle.nu(&x, p, &mut g);
        let y = grid.point(p).to_vec();
        let h = 1e-4;
        for j in 0..2 {
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp[j] += h;
            ym[j] -= h;
            let law = dgp.conditional_law(1, &x).unwrap();
            let fp = FormMixture::new(&k.local_form(&yp).unwrap(), &ConditionalLaw::from_law(&law)).unwrap().eval(&[]);
            let fm = FormMixture::new(&k.local_form(&ym).unwrap(), &ConditionalLaw::from_law(&law)).unwrap().eval(&[]);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} {}", g[j]);
        }
    }
}
