//! Smoothing kernels `κ(y; u)`: isotropic and anisotropic Gaussians, the
//! neighbourhood-PCA proxy, and the diffusion-transported kernel.
//!
//! Every kernel here factors, at a fixed evaluation point `y`, as
//! `κ(y; u) = exp(log_j) · N(t; α u, S)` with `(log_j, t, α, S)` independent of `u`.
//! For the transported kernel `t = Φ⁻¹(y)`, `S = (1-α²)I` and `log_j` is the
//! log-Jacobian of `Φ⁻¹`. Caching that [`LocalForm`] per grid point makes the
//! `n × grid` evaluations needed by the estimators cost one Gaussian each.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_flow, FlowDirection, ForwardDiffusionSpec};
use crate::domain::Grid;
use crate::error::{Error, Result};
use crate::linalg::{mean_cov, quad, spd_inverse, symmetric_eigen, unit_ball_volume};
use crate::par;
use crate::rng::SeedPolicy;
use crate::score::{fit_pca_proxy_points, Ridge, ScoreField};

/// Largest outcome dimension a kernel accepts.
pub const MAX_KERNEL_DIM: usize = 8;

/// `u`-independent factorisation of a kernel at one evaluation point.
#[derive(Debug, Clone)]
pub struct LocalForm {
    pub log_j: f64,
    pub t: Vec<f64>,
    pub alpha: f64,
    pub cov: DMatrix<f64>,
    prec: Vec<f64>,
    log_norm: f64,
}

impl LocalForm {
    pub fn new(log_j: f64, t: Vec<f64>, alpha: f64, cov: DMatrix<f64>) -> Result<Self> {
        let d = t.len();
        if d == 0 || d > MAX_KERNEL_DIM || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::config("dim", format!("kernel dimension must be in 1..={MAX_KERNEL_DIM}")));
        }
        let (inv, logdet) = spd_inverse(&cov)?;
        Ok(Self {
            log_j,
            prec: (0..d * d).map(|k| inv[(k / d, k % d)]).collect(),
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + logdet),
            t,
            alpha,
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    pub fn precision(&self) -> &[f64] {
        &self.prec
    }

    #[inline]
    pub fn log_eval(&self, u: &[f64]) -> f64 {
        let d = self.t.len();
        let mut buf = [0.0f64; MAX_KERNEL_DIM];
        for j in 0..d {
            buf[j] = self.t[j] - self.alpha * u[j];
        }
        self.log_j + self.log_norm - 0.5 * quad(&self.prec, &buf[..d])
    }

    #[inline]
    pub fn eval(&self, u: &[f64]) -> f64 {
        self.log_eval(u).exp()
    }

    /// Kernel value and `-S⁻¹(t - αu)` (gradient of the log-Gaussian in `t`).
    #[inline]
    pub fn eval_with_tgrad(&self, u: &[f64], tgrad: &mut [f64]) -> f64 {
        let d = self.t.len();
        let mut diff = [0.0f64; MAX_KERNEL_DIM];
        for j in 0..d {
            diff[j] = self.t[j] - self.alpha * u[j];
        }
        let mut q = 0.0;
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.prec[i * d + j] * diff[j];
            }
            tgrad[i] = -s;
            q += diff[i] * s;
        }
        (self.log_j + self.log_norm - 0.5 * q).exp()
    }

    /// `∫ κ(y; u)² dy` is not available from a single form; this is the
    /// `u`-integral `∫ N(t; αu, S)² du`, used only for Gaussian-family checks.
    pub fn gaussian_square_integral(&self) -> f64 {
        let d = self.dim() as f64;
        let logdet = -2.0 * self.log_norm - d * (2.0 * PI).ln();
        (4.0 * PI).powf(-d / 2.0) * (-0.5 * logdet).exp()
    }
}

/// How `∇_y κ` is obtained at one point.
#[derive(Debug, Clone)]
pub enum GradForm {
    /// `t(y)` affine with constant `log_j` and `S`: `∇_y κ = κ · (∂t/∂y)ᵀ (-S⁻¹(t - αu))`.
    Analytic { jac_t: Vec<f64> },
    /// Central differences of `κ` with step `delta` per coordinate.
    FiniteDiff {
        plus: Vec<LocalForm>,
        minus: Vec<LocalForm>,
        delta: f64,
    },
}

impl GradForm {
    /// Writes `∇_y κ(y; u)` into `out` and returns `κ(y; u)`.
    #[inline]
    pub fn grad(&self, form: &LocalForm, u: &[f64], out: &mut [f64]) -> f64 {
        let d = form.dim();
        match self {
            GradForm::Analytic { jac_t } => {
                let mut tg = [0.0f64; MAX_KERNEL_DIM];
                let k = form.eval_with_tgrad(u, &mut tg[..d]);
                for j in 0..d {
                    let mut s = 0.0;
                    for i in 0..d {
                        s += jac_t[i * d + j] * tg[i];
                    }
                    out[j] = k * s;
                }
                k
            }
            GradForm::FiniteDiff { plus, minus, delta } => {
                for j in 0..d {
                    out[j] = (plus[j].eval(u) - minus[j].eval(u)) / (2.0 * delta);
                }
                form.eval(u)
            }
        }
    }
}

/// A smoothing density `y ↦ κ(y; u)` for every anchor `u`.
pub trait SmoothingKernel: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    /// Spatial scale `h`.
    fn h(&self) -> f64;
    /// Short family name (`iso`, `aniso`, `pca-proxy`, `transported`).
    fn family(&self) -> &'static str;
    /// Identifies the smoothing operator; estimators and references must agree on it.
    fn fingerprint(&self) -> String;
    fn local_form(&self, y: &[f64]) -> Result<LocalForm>;
    /// `∂t/∂y` (row-major) when the analytic gradient path applies.
    fn analytic_t_jacobian(&self, y: &[f64]) -> Result<Option<Vec<f64>>>;

    fn fd_step(&self) -> f64 {
        1e-4 * self.h()
    }

    fn grad_form(&self, y: &[f64]) -> Result<GradForm> {
        if let Some(jac_t) = self.analytic_t_jacobian(y)? {
            return Ok(GradForm::Analytic { jac_t });
        }
        let delta = self.fd_step();
        let d = y.len();
        let mut plus = Vec::with_capacity(d);
        let mut minus = Vec::with_capacity(d);
        let mut yy = y.to_vec();
        for j in 0..d {
            yy[j] = y[j] + delta;
            plus.push(self.local_form(&yy)?);
            yy[j] = y[j] - delta;
            minus.push(self.local_form(&yy)?);
            yy[j] = y[j];
        }
        Ok(GradForm::FiniteDiff { plus, minus, delta })
    }

    fn eval(&self, y: &[f64], u: &[f64]) -> Result<f64> {
        check_dims(self.dim(), y, u)?;
        Ok(self.local_form(y)?.eval(u))
    }

    fn grad(&self, y: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dim(), y, u)?;
        let form = self.local_form(y)?;
        let mut out = vec![0.0; y.len()];
        self.grad_form(y)?.grad(&form, u, &mut out);
        Ok(out)
    }
}

fn check_dims(d: usize, y: &[f64], u: &[f64]) -> Result<()> {
    if y.len() != d || u.len() != d {
        return Err(Error::Wiring(format!("{d}-dimensional kernel evaluated at a {}-vector", y.len())));
    }
    Ok(())
}

fn identity_flat(d: usize) -> Vec<f64> {
    (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect()
}

fn matrix_key(m: &DMatrix<f64>) -> String {
    m.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

/// `N(y; u, h² I)`.
#[derive(Debug, Clone)]
pub struct IsoKernel {
    d: usize,
    h: f64,
}

impl IsoKernel {
    pub fn new(d: usize, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config("h", "must be positive"));
        }
        if d == 0 || d > MAX_KERNEL_DIM {
            return Err(Error::config("dim", format!("must be in 1..={MAX_KERNEL_DIM}")));
        }
        Ok(Self { d, h })
    }
}

impl SmoothingKernel for IsoKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn h(&self) -> f64 {
        self.h
    }
    fn family(&self) -> &'static str {
        "iso"
    }
    fn fingerprint(&self) -> String {
        format!("iso:{}:{:?}", self.d, self.h)
    }
    fn local_form(&self, y: &[f64]) -> Result<LocalForm> {
        LocalForm::new(0.0, y.to_vec(), 1.0, DMatrix::identity(self.d, self.d) * (self.h * self.h))
    }
    fn analytic_t_jacobian(&self, _y: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(Some(identity_flat(self.d)))
    }
}

/// `N(y; u, Σ)` with a fixed SPD `Σ`.
#[derive(Debug, Clone)]
pub struct AnisoKernel {
    cov: DMatrix<f64>,
    h: f64,
}

impl AnisoKernel {
    /// `h` is recorded for bookkeeping only; the shape is `cov`.
    pub fn new(cov: DMatrix<f64>, h: f64) -> Result<Self> {
        spd_inverse(&cov)?;
        if cov.nrows() > MAX_KERNEL_DIM {
            return Err(Error::config("dim", format!("must be at most {MAX_KERNEL_DIM}")));
        }
        Ok(Self { cov, h })
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

impl SmoothingKernel for AnisoKernel {
    fn dim(&self) -> usize {
        self.cov.nrows()
    }
    fn h(&self) -> f64 {
        self.h
    }
    fn family(&self) -> &'static str {
        "aniso"
    }
    fn fingerprint(&self) -> String {
        format!("aniso:{}", matrix_key(&self.cov))
    }
    fn local_form(&self, y: &[f64]) -> Result<LocalForm> {
        LocalForm::new(0.0, y.to_vec(), 1.0, self.cov.clone())
    }
    fn analytic_t_jacobian(&self, _y: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(Some(identity_flat(self.dim())))
    }
}

pub fn iso_kernel_eval(h: f64, y: &[f64], u: &[f64]) -> Result<f64> {
    IsoKernel::new(y.len(), h)?.eval(y, u)
}

pub fn aniso_kernel_eval(cov: &DMatrix<f64>, y: &[f64], u: &[f64]) -> Result<f64> {
    AnisoKernel::new(cov.clone(), 1.0)?.eval(y, u)
}

/// Configuration of the neighbourhood-PCA local geometry proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaProxyConfig {
    /// Neighbour count as a fraction of the arm size (used when `k_nn` is absent).
    #[serde(default = "default_knn_fraction")]
    pub knn_fraction: f64,
    #[serde(default)]
    pub k_nn: Option<usize>,
    #[serde(default = "default_ridge")]
    pub ridge: Ridge,
    /// Explained-variance share that defines the local tangent directions.
    #[serde(default = "default_tau")]
    pub tangent_share: f64,
    /// Kernel variance off the tangent directions; defaults to the leading
    /// neighbourhood variance.
    #[serde(default)]
    pub normal_var: Option<f64>,
}

fn default_knn_fraction() -> f64 {
    0.1
}
fn default_ridge() -> Ridge {
    Ridge::Auto
}
fn default_tau() -> f64 {
    0.9
}

impl Default for PcaProxyConfig {
    fn default() -> Self {
        Self {
            knn_fraction: default_knn_fraction(),
            k_nn: None,
            ridge: default_ridge(),
            tangent_share: default_tau(),
            normal_var: None,
        }
    }
}

/// Gaussian kernel whose covariance at `y` comes from the principal axes of the
/// `k_nn` arm outcomes nearest to `y`: variance `h²` along the leading axes that
/// explain `tangent_share` of the neighbourhood variance, and an `h`-free variance
/// along the rest. The covariance is frozen at the anchor for gradients.
#[derive(Debug, Clone)]
pub struct PcaProxyKernel {
    points: Arc<Vec<f64>>,
    d: usize,
    h: f64,
    k_nn: usize,
    ridge: Ridge,
    tangent_share: f64,
    normal_var: Option<f64>,
    data_key: String,
}

impl PcaProxyKernel {
    /// `points` are the arm outcomes in evaluation coordinates, row-major.
    pub fn new(points: Vec<f64>, d: usize, h: f64, cfg: &PcaProxyConfig) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::config("h", "must be positive"));
        }
        if d == 0 || d > MAX_KERNEL_DIM || points.len() % d != 0 {
            return Err(Error::config("dim", "outcome rows do not match the kernel dimension"));
        }
        if !(cfg.tangent_share > 0.0 && cfg.tangent_share <= 1.0) {
            return Err(Error::config("tangent_share", "must lie in (0,1]"));
        }
        if let Some(v) = cfg.normal_var {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("normal_var", "must be positive"));
            }
        }
        let m = points.len() / d;
        let k_nn = match cfg.k_nn {
            Some(k) => k,
            None => {
                if !(cfg.knn_fraction > 0.0 && cfg.knn_fraction <= 1.0) {
                    return Err(Error::config("knn_fraction", "must lie in (0,1]"));
                }
                ((cfg.knn_fraction * m as f64).round() as usize).max(d + 1).min(m)
            }
        };
        if k_nn < 2 || k_nn > m {
            return Err(Error::NotEnoughNeighbors {
                available: m,
                requested: k_nn,
            });
        }
        let data_key = crate::domain::hash_f64s(&points);
        Ok(Self {
            points: Arc::new(points),
            d,
            h,
            k_nn,
            ridge: cfg.ridge,
            tangent_share: cfg.tangent_share,
            normal_var: cfg.normal_var,
            data_key,
        })
    }

    pub fn k_nn(&self) -> usize {
        self.k_nn
    }

    /// Same geometry data at another scale.
    pub fn with_h(&self, h: f64) -> Self {
        Self { h, ..self.clone() }
    }

    /// Local kernel covariance at `y`.
    pub fn local_cov(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let proxy = fit_pca_proxy_points(&self.points, y, self.k_nn, self.ridge)?;
        let (vals, vecs) = proxy.principal_axes();
        let total: f64 = vals.iter().sum();
        let mut m = vals.len();
        let mut acc = 0.0;
        for (j, v) in vals.iter().enumerate() {
            acc += v;
            if acc >= self.tangent_share * total * (1.0 - 1e-12) {
                m = j + 1;
                break;
            }
        }
        let normal_var = self.normal_var.unwrap_or(vals[0]);
        let mut cov = DMatrix::zeros(self.d, self.d);
        for (j, v) in vals.iter().enumerate() {
            let var = if j < m { self.h * self.h } else { normal_var.max(*v) };
            let col = vecs.column(j);
            cov += col * col.transpose() * var;
        }
        Ok((&cov + cov.transpose()) * 0.5)
    }
}

impl SmoothingKernel for PcaProxyKernel {
    fn dim(&self) -> usize {
        self.d
    }
    fn h(&self) -> f64 {
        self.h
    }
    fn family(&self) -> &'static str {
        "pca-proxy"
    }
    fn fingerprint(&self) -> String {
        format!(
            "pca-proxy:{}:{:?}:{}:{:?}:{:?}:{:?}:{}",
            self.d, self.h, self.k_nn, self.ridge, self.tangent_share, self.normal_var, self.data_key
        )
    }
    fn local_form(&self, y: &[f64]) -> Result<LocalForm> {
        LocalForm::new(0.0, y.to_vec(), 1.0, self.local_cov(y)?)
    }
    fn analytic_t_jacobian(&self, _y: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(Some(identity_flat(self.d)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Analytic for affine flows, finite differences otherwise.
    #[default]
    Auto,
    FiniteDiff,
}

/// The diffusion-transported kernel `κ(y; u) = q_ε(Φ⁻¹(y) | u) · J(y)`.
#[derive(Debug, Clone)]
pub struct TransportedKernel {
    spec: ForwardDiffusionSpec,
    score: Arc<dyn ScoreField>,
    h: f64,
    eps: f64,
    gradient: GradientMode,
}

impl TransportedKernel {
    pub fn new(spec: ForwardDiffusionSpec, score: Arc<dyn ScoreField>, h: f64) -> Result<Self> {
        spec.validate()?;
        let eps = spec.eps_for(h)?;
        if score.dim() == 0 || score.dim() > MAX_KERNEL_DIM {
            return Err(Error::config("dim", format!("must be in 1..={MAX_KERNEL_DIM}")));
        }
        Ok(Self {
            spec,
            score,
            h,
            eps,
            gradient: GradientMode::Auto,
        })
    }

    pub fn with_gradient_mode(mut self, mode: GradientMode) -> Self {
        self.gradient = mode;
        self
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn spec(&self) -> &ForwardDiffusionSpec {
        &self.spec
    }

    pub fn score(&self) -> &Arc<dyn ScoreField> {
        &self.score
    }

    pub fn alpha(&self) -> f64 {
        self.spec.alpha(self.eps)
    }

    pub fn noise_var(&self) -> f64 {
        self.spec.noise_var(self.eps)
    }

    /// `count` draws from `κ(·; u)`, row-major.
    pub fn sample<R: Rng + ?Sized>(&self, u: &[f64], count: usize, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.dim();
        if u.len() != d {
            return Err(Error::Wiring("anchor dimension differs from kernel dimension".into()));
        }
        if count == 0 {
            return Err(Error::config("count", "must be positive"));
        }
        let a = self.alpha();
        let sd = self.noise_var().sqrt();
        let mut starts = Vec::with_capacity(count * d);
        for _ in 0..count {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                starts.push(a * u[j] + sd * z);
            }
        }
        let rows = par::try_map_indexed(count, |i| {
            reverse_flow(
                &self.spec,
                self.score.as_ref(),
                self.eps,
                &starts[i * d..(i + 1) * d],
                FlowDirection::NoisyToClean,
                false,
            )
            .map(|f| f.endpoint)
        })?;
        Ok(rows.concat())
    }

    /// Monte-Carlo kernel mean, covariance and precision at anchor `u`.
    pub fn moments(&self, u: &[f64], mc_count: usize, seed: &SeedPolicy) -> Result<KernelMoments> {
        if mc_count < 100 {
            return Err(Error::config("mc_count", "need at least 100 draws"));
        }
        let draws = self.sample(u, mc_count, &mut seed.stream("kernel-moments"))?;
        KernelMoments::from_samples(&draws, self.dim())
    }
}

impl SmoothingKernel for TransportedKernel {
    fn dim(&self) -> usize {
        self.score.dim()
    }
    fn h(&self) -> f64 {
        self.h
    }
    fn family(&self) -> &'static str {
        "transported"
    }
    fn fingerprint(&self) -> String {
        format!(
            "transported:{:?}:{}:{}",
            self.h,
            serde_json::to_string(&self.spec).unwrap_or_default(),
            self.score.fingerprint()
        )
    }
    fn local_form(&self, y: &[f64]) -> Result<LocalForm> {
        let f = reverse_flow(&self.spec, self.score.as_ref(), self.eps, y, FlowDirection::CleanToNoisy, false)?;
        let d = self.dim();
        LocalForm::new(f.log_jacobian, f.endpoint, self.alpha(), DMatrix::identity(d, d) * self.noise_var())
    }
    fn analytic_t_jacobian(&self, y: &[f64]) -> Result<Option<Vec<f64>>> {
        if self.gradient == GradientMode::FiniteDiff || !self.score.is_affine() {
            return Ok(None);
        }
        let f = reverse_flow(&self.spec, self.score.as_ref(), self.eps, y, FlowDirection::CleanToNoisy, true)?;
        let jac = f.jacobian.expect("requested");
        let d = self.dim();
        Ok(Some((0..d * d).map(|k| jac[(k / d, k % d)]).collect()))
    }
}

/// Kernel mean `m_h`, covariance `Σ_h` and precision `G_h = Σ_h⁻¹` at one anchor.
#[derive(Debug, Clone)]
pub struct KernelMoments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub count: usize,
    /// Standard errors of the mean coordinates.
    pub mean_se: Vec<f64>,
    /// Standard errors of the covariance entries (normal-theory).
    pub cov_se: DMatrix<f64>,
}

impl KernelMoments {
    pub fn from_samples(draws: &[f64], d: usize) -> Result<Self> {
        let count = draws.len() / d;
        let (mean, cov) = mean_cov(draws, d);
        let floor = 1e-10 * cov.trace() / d as f64;
        let min_eig = symmetric_eigen(&cov).eigenvalues.min();
        if !(min_eig > floor) {
            return Err(Error::SingularMoments { min_eig, floor });
        }
        let (precision, _) = spd_inverse(&cov)?;
        let nf = count as f64;
        let mean_se = (0..d).map(|j| (cov[(j, j)] / nf).sqrt()).collect();
        let cov_se = DMatrix::from_fn(d, d, |i, j| ((cov[(i, j)].powi(2) + cov[(i, i)] * cov[(j, j)]) / nf).sqrt());
        Ok(Self {
            mean,
            cov,
            precision,
            count,
            mean_se,
            cov_se,
        })
    }
}

/// `Vol{v : vᵀ G v ≤ c} = Vol(B_d) c^{d/2} det(G)^{-1/2}`.
pub fn ellipsoid_volume(precision: &DMatrix<f64>, c: f64) -> Result<f64> {
    let (_, logdet) = spd_inverse(precision)?;
    let d = precision.nrows();
    Ok(unit_ball_volume(d) * c.powf(d as f64 / 2.0) * (-0.5 * logdet).exp())
}

/// Hit-or-miss Monte-Carlo estimate of the same ellipsoid volume.
pub fn ellipsoid_volume_mc<R: Rng + ?Sized>(precision: &DMatrix<f64>, c: f64, count: usize, rng: &mut R) -> Result<f64> {
    let d = precision.nrows();
    let (cov, _) = spd_inverse(precision)?;
    let half: Vec<f64> = (0..d).map(|j| (c * cov[(j, j)]).sqrt()).collect();
    let box_vol: f64 = half.iter().map(|w| 2.0 * w).product();
    let prec: Vec<f64> = (0..d * d).map(|k| precision[(k / d, k % d)]).collect();
    let mut v = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..count {
        for j in 0..d {
            v[j] = (rng.random::<f64>() * 2.0 - 1.0) * half[j];
        }
        if quad(&prec, &v) <= c {
            hits += 1;
        }
    }
    Ok(box_vol * hits as f64 / count as f64)
}

/// Kernel forms cached on every point of a grid.
#[derive(Debug, Clone)]
pub struct GridKernel {
    kernel_fp: String,
    grid_fp: String,
    family: &'static str,
    h: f64,
    dim: usize,
    forms: Vec<LocalForm>,
    grads: Option<Vec<GradForm>>,
}

impl GridKernel {
    pub fn build(kernel: &dyn SmoothingKernel, grid: &Grid, with_grad: bool) -> Result<Self> {
        if kernel.dim() != grid.dim {
            return Err(Error::Wiring(format!(
                "kernel of dimension {} on a {}-dimensional grid",
                kernel.dim(),
                grid.dim
            )));
        }
        let forms = par::try_map_indexed(grid.len(), |p| kernel.local_form(grid.point(p)))?;
        let grads = if with_grad {
            Some(par::try_map_indexed(grid.len(), |p| kernel.grad_form(grid.point(p)))?)
        } else {
            None
        };
        Ok(Self {
            kernel_fp: kernel.fingerprint(),
            grid_fp: grid.fingerprint().to_string(),
            family: kernel.family(),
            h: kernel.h(),
            dim: kernel.dim(),
            forms,
            grads,
        })
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn family(&self) -> &'static str {
        self.family
    }

    pub fn kernel_fingerprint(&self) -> &str {
        &self.kernel_fp
    }

    pub fn grid_fingerprint(&self) -> &str {
        &self.grid_fp
    }

    pub fn has_grad(&self) -> bool {
        self.grads.is_some()
    }

    pub fn form(&self, p: usize) -> &LocalForm {
        &self.forms[p]
    }

    pub fn forms(&self) -> &[LocalForm] {
        &self.forms
    }

    pub fn grad_form(&self, p: usize) -> Option<&GradForm> {
        self.grads.as_ref().map(|g| &g[p])
    }

    #[inline]
    pub fn eval(&self, p: usize, u: &[f64]) -> f64 {
        self.forms[p].eval(u)
    }

    /// Writes `∇_y κ(y_p; u)` and returns `κ(y_p; u)`.
    #[inline]
    pub fn grad(&self, p: usize, u: &[f64], out: &mut [f64]) -> f64 {
        match &self.grads {
            Some(g) => g[p].grad(&self.forms[p], u, out),
            None => panic!("grid kernel was built without gradients"),
        }
    }

    /// Fails unless this cache was built for `grid`.
    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.fingerprint() != self.grid_fp {
            return Err(Error::Wiring("grid".into()));
        }
        Ok(())
    }
}
