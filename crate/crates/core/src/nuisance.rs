//! Cross-fitted nuisance functions: the propensity `π_a(x)`, the localized
//! regression `μ(x; y) ≈ E{κ(y; Y) | X = x, A = a}` and its gradient analogue `ν`.
//!
//! Localized regressions are ridge-linear in affine covariate features. Because
//! the design is shared by every grid point, each fold needs one factorisation
//! and per-fold sufficient statistics `Σ φ(x_i) κ(y_p; Y_i)`; training statistics
//! for fold `f` are the sum over the other folds.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::domain::{CrossFitPlan, ObservationBatch};
use crate::error::{Error, Result};
use crate::kernel::GridKernel;
use crate::par;

/// Read access to fitted (or oracle) nuisances for unit `i` and grid point `p`.
/// Implementations guarantee that unit `i` is served by models trained without its fold.
pub trait NuisanceView: Send + Sync {
    fn arm(&self) -> i64;
    fn n(&self) -> usize;
    /// Kernel fingerprint the regressions were built for (`None` = any kernel).
    fn kernel_fingerprint(&self) -> Option<&str>;
    fn grid_fingerprint(&self) -> Option<&str>;
    fn pi(&self, i: usize) -> f64;
    fn mu(&self, i: usize, p: usize) -> f64;
    fn has_grad(&self) -> bool;
    /// Writes `ν(x_i; y_p)`.
    fn nu(&self, i: usize, p: usize, out: &mut [f64]);
    fn clip_events(&self) -> usize {
        0
    }
}

/// Fails unless `view` was built for this kernel cache and arm.
pub fn check_wiring(view: &dyn NuisanceView, gk: &GridKernel, arm: i64, n: usize) -> Result<()> {
    if view.arm() != arm {
        return Err(Error::Wiring(format!("arm (nuisance for {}, estimator for {arm})", view.arm())));
    }
    if view.n() != n {
        return Err(Error::Wiring(format!("sample (nuisance for {} units, batch has {n})", view.n())));
    }
    if let Some(fp) = view.kernel_fingerprint() {
        if fp != gk.kernel_fingerprint() {
            return Err(Error::Wiring("kernel".into()));
        }
    }
    if let Some(fp) = view.grid_fingerprint() {
        if fp != gk.grid_fingerprint() {
            return Err(Error::Wiring("grid".into()));
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic model for `P(A = a | x)` with intercept first.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub clip: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Folds whose units trained this model.
    pub trained_on: Vec<usize>,
}

impl PropensityModel {
    pub fn raw(&self, x: &[f64]) -> f64 {
        let z = self.coefficients[0] + x.iter().zip(&self.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>();
        sigmoid(z)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.raw(x).max(self.clip)
    }
}

/// Logistic regression by iteratively reweighted least squares on rows `idx`.
pub fn fit_logistic(batch: &ObservationBatch, arm: i64, idx: &[usize], clip: f64) -> PropensityModel {
    let k = batch.k;
    let p = k + 1;
    let mut beta = DVector::<f64>::zeros(p);
    let mut iterations = 0;
    let mut converged = false;
    let mut feat = vec![0.0; p];
    for it in 0..100 {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for &i in idx {
            feat[0] = 1.0;
            feat[1..].copy_from_slice(batch.x_row(i));
            let z: f64 = feat.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let pr = sigmoid(z);
            let yv = if batch.a[i] == arm { 1.0 } else { 0.0 };
            let w = (pr * (1.0 - pr)).max(1e-12);
            for r in 0..p {
                grad[r] += feat[r] * (yv - pr);
                for c in 0..=r {
                    hess[(r, c)] += w * feat[r] * feat[c];
                }
            }
        }
        for r in 0..p {
            for c in 0..r {
                hess[(c, r)] = hess[(r, c)];
            }
        }
        if grad.norm() <= 1e-8 {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let reg = &hess + DMatrix::identity(p, p) * 1e-8;
                match reg.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => break,
                }
            }
        };
        beta += step;
        if beta.iter().any(|v| !v.is_finite()) {
            beta.fill(0.0);
            break;
        }
    }
    if !converged {
        log::warn!("propensity IRLS stopped after {iterations} iterations without reaching the gradient tolerance");
    }
    PropensityModel {
        coefficients: beta.iter().copied().collect(),
        clip,
        iterations,
        converged,
        trained_on: Vec::new(),
    }
}

/// Per-fold propensity models and held-out predictions.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    pub arm: i64,
    pub models: Vec<PropensityModel>,
    /// Held-out clipped prediction for every unit.
    pub predictions: Vec<f64>,
    pub clip_events: usize,
}

pub fn fit_propensity(batch: &ObservationBatch, arm: i64, plan: &CrossFitPlan, clip: f64) -> Result<PropensityFit> {
    if !(0.0..0.5).contains(&clip) {
        return Err(Error::config("clip", "must lie in [0, 0.5)"));
    }
    if plan.n != batch.n {
        return Err(Error::Wiring("cross-fit plan".into()));
    }
    let mut models = Vec::with_capacity(plan.folds);
    for f in 0..plan.folds {
        let train: Vec<usize> = (0..batch.n).filter(|&i| plan.assignment[i] != f).collect();
        let treated = train.iter().filter(|&&i| batch.a[i] == arm).count();
        if treated == 0 || treated == train.len() {
            return Err(Error::DegenerateFold { fold: f });
        }
        let mut m = fit_logistic(batch, arm, &train, clip);
        m.trained_on = (0..plan.folds).filter(|&g| g != f).collect();
        models.push(m);
    }
    let mut clip_events = 0;
    let predictions = (0..batch.n)
        .map(|i| {
            let m = &models[plan.assignment[i]];
            let raw = m.raw(batch.x_row(i));
            if raw < clip {
                clip_events += 1;
            }
            raw.max(clip)
        })
        .collect();
    Ok(PropensityFit {
        arm,
        models,
        predictions,
        clip_events,
    })
}

/// Ridge strength for the localized regressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionRidge {
    /// `1e-6 · n`.
    Default,
    Fixed(f64),
}

/// Covariate feature maps for the localized regressions, keyed by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// `(1, x)`; the intercept is not penalised.
    Affine,
}

impl FeatureMap {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "affine" => Ok(FeatureMap::Affine),
            other => Err(Error::config("features", format!("unknown feature map `{other}`"))),
        }
    }

    fn width(&self, k: usize) -> usize {
        k + 1
    }

    fn fill(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1..].copy_from_slice(x);
    }
}

/// Cross-fitted propensity plus localized regressions on a grid.
#[derive(Debug, Clone)]
pub struct CrossFitNuisance {
    pub plan: CrossFitPlan,
    pub propensity: PropensityFit,
    pub ridge: f64,
    pub features: FeatureMap,
    kernel_fp: String,
    grid_fp: String,
    x: Arc<Vec<f64>>,
    k: usize,
    dim: usize,
    grid_len: usize,
    /// `[fold][p][c]`.
    mu_coef: Vec<f64>,
    /// `[fold][p][j][c]`.
    nu_coef: Option<Vec<f64>>,
}

impl CrossFitNuisance {
    fn width(&self) -> usize {
        self.features.width(self.k)
    }

    #[inline]
    fn dot(&self, i: usize, coef: &[f64]) -> f64 {
        let x = &self.x[i * self.k..(i + 1) * self.k];
        coef[0] + x.iter().zip(&coef[1..]).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Coefficients `(intercept, slopes)` of the μ regression for `fold` at grid point `p`.
    pub fn mu_coefficients(&self, fold: usize, p: usize) -> &[f64] {
        let w = self.width();
        let o = (fold * self.grid_len + p) * w;
        &self.mu_coef[o..o + w]
    }

    pub fn folds(&self) -> usize {
        self.plan.folds
    }

    /// JSON export of every coefficient, refused above `10⁷` scalars.
    pub fn to_json(&self) -> Result<String> {
        let scalars = self.mu_coef.len() + self.nu_coef.as_ref().map_or(0, Vec::len);
        const LIMIT: usize = 10_000_000;
        if scalars > LIMIT {
            return Err(Error::TooLarge { scalars, limit: LIMIT });
        }
        let w = self.width();
        let per_fold = |coef: &[f64], stride: usize| -> Vec<Vec<Vec<f64>>> {
            (0..self.plan.folds)
                .map(|f| {
                    (0..self.grid_len)
                        .map(|p| {
                            let o = (f * self.grid_len + p) * stride;
                            coef[o..o + stride].to_vec()
                        })
                        .collect()
                })
                .collect()
        };
        let doc = serde_json::json!({
            "arm": self.propensity.arm,
            "features": self.features,
            "ridge": self.ridge,
            "propensity": self.propensity.models,
            "clip_events": self.propensity.clip_events,
            "mu": per_fold(&self.mu_coef, w),
            "nu": self.nu_coef.as_ref().map(|c| per_fold(c, w * self.dim)),
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

impl NuisanceView for CrossFitNuisance {
    fn arm(&self) -> i64 {
        self.propensity.arm
    }
    fn n(&self) -> usize {
        self.plan.n
    }
    fn kernel_fingerprint(&self) -> Option<&str> {
        Some(&self.kernel_fp)
    }
    fn grid_fingerprint(&self) -> Option<&str> {
        Some(&self.grid_fp)
    }
    #[inline]
    fn pi(&self, i: usize) -> f64 {
        self.propensity.predictions[i]
    }
    #[inline]
    fn mu(&self, i: usize, p: usize) -> f64 {
        let f = self.plan.assignment[i];
        self.dot(i, self.mu_coefficients(f, p))
    }
    fn has_grad(&self) -> bool {
        self.nu_coef.is_some()
    }
    fn nu(&self, i: usize, p: usize, out: &mut [f64]) {
        let coef = self.nu_coef.as_ref().expect("nuisance was fitted without gradient regressions");
        let f = self.plan.assignment[i];
        let w = self.width();
        let base = (f * self.grid_len + p) * w * self.dim;
        for j in 0..self.dim {
            out[j] = self.dot(i, &coef[base + j * w..base + (j + 1) * w]);
        }
    }
    fn clip_events(&self) -> usize {
        self.propensity.clip_events
    }
}

/// Fits `μ̂` (and `ν̂` when `with_grad`) on every grid point with cross fitting.
/// `outcomes` are the batch outcomes in grid coordinates, row-major.
#[allow(clippy::too_many_arguments)]
pub fn fit_localized_regressions(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    plan: &CrossFitPlan,
    propensity: PropensityFit,
    gk: &GridKernel,
    ridge: RegressionRidge,
    with_grad: bool,
) -> Result<CrossFitNuisance> {
    let dim = gk.dim();
    if outcomes.len() != batch.n * dim {
        return Err(Error::Wiring("outcomes are not in grid coordinates".into()));
    }
    if plan.n != batch.n || propensity.predictions.len() != batch.n || propensity.models.len() != plan.folds {
        return Err(Error::Wiring("cross-fit plan".into()));
    }
    if with_grad && !gk.has_grad() {
        return Err(Error::Wiring("kernel cache lacks gradients".into()));
    }
    if gk.is_empty() {
        return Err(Error::config("grid", "must be nonempty"));
    }
    let ridge = match ridge {
        RegressionRidge::Default => 1e-6 * batch.n as f64,
        RegressionRidge::Fixed(r) if r >= 0.0 && r.is_finite() => r,
        RegressionRidge::Fixed(_) => return Err(Error::config("ridge", "must be nonnegative")),
    };
    let features = FeatureMap::Affine;
    let k = batch.k;
    let w = features.width(k);
    let folds = plan.folds;
    let arm_units = batch.arm_indices(arm);
    if arm_units.is_empty() {
        return Err(Error::EmptyArm(arm));
    }
    let mut phi = vec![0.0; arm_units.len() * w];
    for (r, &i) in arm_units.iter().enumerate() {
        features.fill(batch.x_row(i), &mut phi[r * w..(r + 1) * w]);
    }

    // per-fold Gram matrices, then training Grams with Cholesky factors
    let mut gram_by_fold = vec![DMatrix::<f64>::zeros(w, w); folds];
    for (r, &i) in arm_units.iter().enumerate() {
        let g = &mut gram_by_fold[plan.assignment[i]];
        let f = &phi[r * w..(r + 1) * w];
        for a in 0..w {
            for b in 0..w {
                g[(a, b)] += f[a] * f[b];
            }
        }
    }
    let mut chols = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut g = DMatrix::<f64>::zeros(w, w);
        for (h, gh) in gram_by_fold.iter().enumerate() {
            if h != f {
                g += gh;
            }
        }
        if g[(0, 0)] == 0.0 {
            return Err(Error::DegenerateFold { fold: f });
        }
        for c in 1..w {
            g[(c, c)] += ridge;
        }
        let ch = g
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("training design for fold {f}")))?;
        chols.push(ch);
    }

    // per-fold right-hand sides for every grid point
    let nrhs = if with_grad { 1 + dim } else { 1 };
    let stats = par::map_indexed(gk.len(), |p| {
        let mut acc = vec![0.0; folds * nrhs * w];
        let mut g = vec![0.0; dim];
        for (r, &i) in arm_units.iter().enumerate() {
            let u = &outcomes[i * dim..(i + 1) * dim];
            let kv = if with_grad { gk.grad(p, u, &mut g) } else { gk.eval(p, u) };
            let f = plan.assignment[i];
            let feat = &phi[r * w..(r + 1) * w];
            let o = f * nrhs * w;
            for c in 0..w {
                acc[o + c] += feat[c] * kv;
            }
            if with_grad {
                for j in 0..dim {
                    let oj = o + (1 + j) * w;
                    for c in 0..w {
                        acc[oj + c] += feat[c] * g[j];
                    }
                }
            }
        }
        acc
    });

    let grid_len = gk.len();
    let mut mu_coef = vec![0.0; folds * grid_len * w];
    let mut nu_coef = with_grad.then(|| vec![0.0; folds * grid_len * dim * w]);
    let mut rhs = DVector::<f64>::zeros(w);
    for (p, acc) in stats.iter().enumerate() {
        for f in 0..folds {
            for q in 0..nrhs {
                rhs.fill(0.0);
                for h in 0..folds {
                    if h == f {
                        continue;
                    }
                    let o = (h * nrhs + q) * w;
                    for c in 0..w {
                        rhs[c] += acc[o + c];
                    }
                }
                let sol = chols[f].solve(&rhs);
                if sol.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Singular(format!("fold {f}, grid point {p}")));
                }
                if q == 0 {
                    let o = (f * grid_len + p) * w;
                    mu_coef[o..o + w].copy_from_slice(sol.as_slice());
                } else if let Some(nu) = nu_coef.as_mut() {
                    let o = ((f * grid_len + p) * dim + (q - 1)) * w;
                    nu[o..o + w].copy_from_slice(sol.as_slice());
                }
            }
        }
    }
    Ok(CrossFitNuisance {
        plan: plan.clone(),
        propensity,
        ridge,
        features,
        kernel_fp: gk.kernel_fingerprint().to_string(),
        grid_fp: gk.grid_fingerprint().to_string(),
        x: Arc::new(batch.x.clone()),
        k,
        dim,
        grid_len,
        mu_coef,
        nu_coef,
    })
}

/// Population conditional means `E{κ(y_p; Y) | X = x, A = a}` and their gradients.
pub trait ConditionalMean: Send + Sync {
    fn mu(&self, x: &[f64], p: usize) -> f64;
    fn nu(&self, x: &[f64], p: usize, out: &mut [f64]);
    fn has_grad(&self) -> bool;
    fn kernel_fingerprint(&self) -> &str;
    fn grid_fingerprint(&self) -> &str;
}

/// Exact propensities and conditional means supplied by a known data-generating process.
#[derive(Clone)]
pub struct OracleNuisance {
    pub arm: i64,
    pub pi: Vec<f64>,
    x: Arc<Vec<f64>>,
    k: usize,
    cond: Arc<dyn ConditionalMean>,
}

impl std::fmt::Debug for OracleNuisance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleNuisance").field("arm", &self.arm).field("n", &self.pi.len()).finish()
    }
}

impl OracleNuisance {
    pub fn new(batch: &ObservationBatch, arm: i64, pi: Vec<f64>, cond: Arc<dyn ConditionalMean>) -> Result<Self> {
        if pi.len() != batch.n {
            return Err(Error::Wiring("propensity vector length".into()));
        }
        Ok(Self {
            arm,
            pi,
            x: Arc::new(batch.x.clone()),
            k: batch.k,
            cond,
        })
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }
}

impl NuisanceView for OracleNuisance {
    fn arm(&self) -> i64 {
        self.arm
    }
    fn n(&self) -> usize {
        self.pi.len()
    }
    fn kernel_fingerprint(&self) -> Option<&str> {
        Some(self.cond.kernel_fingerprint())
    }
    fn grid_fingerprint(&self) -> Option<&str> {
        Some(self.cond.grid_fingerprint())
    }
    fn pi(&self, i: usize) -> f64 {
        self.pi[i]
    }
    fn mu(&self, i: usize, p: usize) -> f64 {
        self.cond.mu(self.x(i), p)
    }
    fn has_grad(&self) -> bool {
        self.cond.has_grad()
    }
    fn nu(&self, i: usize, p: usize, out: &mut [f64]) {
        self.cond.nu(self.x(i), p, out)
    }
}

/// `π ≡ 1`, `μ ≡ 0`, `ν ≡ 0`: turns the one-step estimator into a plain kernel average.
#[derive(Debug, Clone)]
pub struct TrivialNuisance {
    pub arm: i64,
    pub n: usize,
}

impl NuisanceView for TrivialNuisance {
    fn arm(&self) -> i64 {
        self.arm
    }
    fn n(&self) -> usize {
        self.n
    }
    fn kernel_fingerprint(&self) -> Option<&str> {
        None
    }
    fn grid_fingerprint(&self) -> Option<&str> {
        None
    }
    fn pi(&self, _i: usize) -> f64 {
        1.0
    }
    fn mu(&self, _i: usize, _p: usize) -> f64 {
        0.0
    }
    fn has_grad(&self) -> bool {
        true
    }
    fn nu(&self, _i: usize, _p: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// How the regression nuisance is shifted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuShift {
    /// `μ + eps`.
    Constant,
    /// `μ · (1 + eps · x_j)`.
    Relative { covariate: usize },
}

/// Controlled nuisance errors of known size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisancePerturbation {
    /// Added to the propensity logit as `pi_eps · x_j`.
    pub pi_eps: f64,
    pub pi_covariate: usize,
    pub mu_eps: f64,
    pub mu_shift: MuShift,
}

impl NuisancePerturbation {
    /// Both nuisances perturbed by `eps` along covariate 0.
    pub fn joint(eps: f64) -> Self {
        Self {
            pi_eps: eps,
            pi_covariate: 0,
            mu_eps: eps,
            mu_shift: MuShift::Relative { covariate: 0 },
        }
    }
}

/// A nuisance view with [`NuisancePerturbation`] applied.
pub struct PerturbedNuisance<'a> {
    base: &'a dyn NuisanceView,
    batch: &'a ObservationBatch,
    pert: NuisancePerturbation,
    pi: Vec<f64>,
}

impl<'a> PerturbedNuisance<'a> {
    pub fn new(base: &'a dyn NuisanceView, batch: &'a ObservationBatch, pert: NuisancePerturbation) -> Result<Self> {
        let covs = [pert.pi_covariate, match pert.mu_shift {
            MuShift::Relative { covariate } => covariate,
            MuShift::Constant => 0,
        }];
        if covs.iter().any(|&c| c >= batch.k.max(1)) || (batch.k == 0 && pert.pi_eps != 0.0) {
            return Err(Error::config("covariate", "perturbation covariate out of range"));
        }
        let pi = (0..batch.n)
            .map(|i| {
                let p = base.pi(i).clamp(1e-12, 1.0 - 1e-12);
                if pert.pi_eps == 0.0 {
                    base.pi(i)
                } else {
                    sigmoid(logit(p) + pert.pi_eps * batch.x_row(i)[pert.pi_covariate])
                }
            })
            .collect();
        Ok(Self { base, batch, pert, pi })
    }
}

impl NuisanceView for PerturbedNuisance<'_> {
    fn arm(&self) -> i64 {
        self.base.arm()
    }
    fn n(&self) -> usize {
        self.base.n()
    }
    fn kernel_fingerprint(&self) -> Option<&str> {
        self.base.kernel_fingerprint()
    }
    fn grid_fingerprint(&self) -> Option<&str> {
        self.base.grid_fingerprint()
    }
    fn pi(&self, i: usize) -> f64 {
        self.pi[i]
    }
    fn mu(&self, i: usize, p: usize) -> f64 {
        let m = self.base.mu(i, p);
        match self.pert.mu_shift {
            MuShift::Constant => m + self.pert.mu_eps,
            MuShift::Relative { covariate } => m * (1.0 + self.pert.mu_eps * self.batch.x_row(i)[covariate]),
        }
    }
    fn has_grad(&self) -> bool {
        self.base.has_grad()
    }
    fn nu(&self, i: usize, p: usize, out: &mut [f64]) {
        self.base.nu(i, p, out);
        if let MuShift::Relative { covariate } = self.pert.mu_shift {
            let s = 1.0 + self.pert.mu_eps * self.batch.x_row(i)[covariate];
            out.iter_mut().for_each(|v| *v *= s);
        }
    }
}
