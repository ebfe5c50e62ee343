//! Score fields `s(z, t) = ∇_z log p_t(z)` of the diffusion-perturbed geometry law:
//! exact Gaussian mixtures, controlled perturbations of them, and the
//! neighbourhood-PCA local geometry proxy.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::ForwardDiffusionSpec;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, mean_cov, symmetric_eigen, Gaussian};

/// Finite Gaussian mixture `Σ_j w_j N(m_j, Σ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureLaw {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixtureLaw {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let law = Self {
            weights,
            means,
            covariances: covariances
                .iter()
                .map(|c| (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect())
                .collect(),
        };
        law.validate()?;
        Ok(law)
    }

    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn standard_normal(d: usize) -> Self {
        Self::gaussian(vec![0.0; d], DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn cov(&self, j: usize) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |r, c| self.covariances[j][r][c])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::config("weights", "weights, means and covariances must have equal nonzero length"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("weights", format!("must be nonnegative and sum to 1 (sum = {sum})")));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::config("means", "dimension must be positive"));
        }
        for j in 0..k {
            if self.means[j].len() != d || self.means[j].iter().any(|v| !v.is_finite()) {
                return Err(Error::config("means", format!("component {j} has a bad mean")));
            }
            if self.covariances[j].len() != d || self.covariances[j].iter().any(|r| r.len() != d) {
                return Err(Error::config("covariances", format!("component {j} is not {d}×{d}")));
            }
            let c = self.cov(j);
            if (&c - c.transpose()).amax() > 1e-10 * (1.0 + c.amax()) {
                return Err(Error::config("covariances", format!("component {j} is not symmetric")));
            }
            let min_eig = symmetric_eigen(&c).eigenvalues.min();
            if !(min_eig > 0.0) {
                return Err(Error::config("covariances", format!("component {j} is not positive definite")));
            }
        }
        Ok(())
    }

    /// Exact time-`t` marginal of the variance-preserving diffusion started at this law.
    pub fn diffused(&self, spec: &ForwardDiffusionSpec, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::config("t", "diffusion time must lie in [0,1]"));
        }
        if t == 0.0 {
            return Ok(self.clone());
        }
        let a = spec.alpha(t);
        let s2 = spec.noise_var(t);
        let d = self.dim();
        let means = self.means.iter().map(|m| m.iter().map(|v| a * v).collect()).collect();
        let covs = (0..self.len())
            .map(|j| self.cov(j) * (a * a) + DMatrix::identity(d, d) * s2)
            .collect();
        Self::new(self.weights.clone(), means, covs)
    }

    /// Law of `A z + b` for `z` from this mixture.
    pub fn affine_image(&self, a: &DMatrix<f64>, b: &[f64]) -> Result<Self> {
        let means = self
            .means
            .iter()
            .map(|m| {
                let v = a * nalgebra::DVector::from_column_slice(m);
                v.iter().zip(b).map(|(x, y)| x + y).collect()
            })
            .collect();
        let covs = (0..self.len()).map(|j| a * self.cov(j) * a.transpose()).collect();
        Self::new(self.weights.clone(), means, covs)
    }

    /// Adds `extra` to every component covariance (convolution with `N(0, extra)`).
    pub fn convolve(&self, extra: &DMatrix<f64>) -> Result<Self> {
        let covs = (0..self.len()).map(|j| self.cov(j) + extra).collect();
        Self::new(self.weights.clone(), self.means.clone(), covs)
    }

    pub fn components(&self) -> Result<Vec<(f64, Gaussian)>> {
        (0..self.len())
            .map(|j| Ok((self.weights[j], Gaussian::new(self.means[j].clone(), self.cov(j))?)))
            .collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let terms: Vec<f64> = self
            .components()?
            .iter()
            .map(|(w, g)| w.ln() + g.log_pdf(z))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density(z)?.exp())
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (w, mj) in self.weights.iter().zip(&self.means) {
            for i in 0..d {
                m[i] += w * mj[i];
            }
        }
        m
    }

    /// Row-major `count × d` draws.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.dim();
        let chols: Vec<DMatrix<f64>> = (0..self.len())
            .map(|j| {
                self.cov(j)
                    .cholesky()
                    .map(|c| c.l())
                    .ok_or_else(|| Error::Decomposition(format!("component {j} covariance")))
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(count * d);
        let mut z = vec![0.0; d];
        for _ in 0..count {
            let j = pick(&self.weights, rng.random::<f64>());
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let l = &chols[j];
            for r in 0..d {
                let mut s = self.means[j][r];
                for c in 0..=r {
                    s += l[(r, c)] * z[c];
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let law: Self = serde_json::from_str(s)?;
        law.validate()?;
        Ok(law)
    }
}

pub(crate) fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return j;
        }
    }
    weights.len() - 1
}

/// `∇_z log Σ_j w_j N(z; m_j, Σ_j)` with log-sum-exp stabilisation.
pub fn mixture_score(law: &GaussianMixtureLaw, z: &[f64]) -> Result<Vec<f64>> {
    let cache = EigenMixture::new(law)?;
    let mut out = vec![0.0; law.dim()];
    cache.eval(1.0, 0.0, z, &mut out, None);
    Ok(out)
}

pub fn diffused_mixture(law: &GaussianMixtureLaw, t: f64, spec: &ForwardDiffusionSpec) -> Result<GaussianMixtureLaw> {
    law.diffused(spec, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    ExactMixture,
    Perturbed,
    PcaProxy,
}

/// Evaluable score field of a diffused geometry law. Evaluation is pure and
/// may be called concurrently.
pub trait ScoreField: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn kind(&self) -> ScoreKind;
    fn score(&self, z: &[f64], t: f64, out: &mut [f64]);
    /// Writes `∇_z s(z,t)` row-major; returns false when no analytic Jacobian exists.
    fn jacobian(&self, z: &[f64], t: f64, out: &mut [f64]) -> bool;
    /// True when `s(·, t)` is affine in `z` for every `t`.
    fn is_affine(&self) -> bool;
    /// Stable identifier used to check wiring between kernels and nuisances.
    fn fingerprint(&self) -> String;
}

/// Mixture components in eigen-coordinates so that diffused covariances
/// `α²Σ + (1-α²)I` can be inverted without a fresh factorisation.
#[derive(Debug, Clone)]
struct EigenMixture {
    d: usize,
    log_w: Vec<f64>,
    means: Vec<Vec<f64>>,
    // row-major eigenvector matrices (column k = eigenvector k)
    vecs: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
}

impl EigenMixture {
    fn new(law: &GaussianMixtureLaw) -> Result<Self> {
        law.validate()?;
        let d = law.dim();
        let mut vecs = Vec::new();
        let mut vals = Vec::new();
        for j in 0..law.len() {
            let e = symmetric_eigen(&law.cov(j));
            vecs.push((0..d * d).map(|k| e.eigenvectors[(k / d, k % d)]).collect());
            vals.push(e.eigenvalues.iter().copied().collect());
        }
        Ok(Self {
            d,
            log_w: law.weights.iter().map(|w| w.ln()).collect(),
            means: law.means.clone(),
            vecs,
            vals,
        })
    }

    /// Score of the law with means scaled by `a` and covariances `a²Σ + s2 I`;
    /// optionally its Jacobian.
    fn eval(&self, a: f64, s2: f64, z: &[f64], out: &mut [f64], jac: Option<&mut [f64]>) {
        let d = self.d;
        let k = self.log_w.len();
        let mut logp = [0.0f64; 32];
        let mut heap_logp;
        let logp: &mut [f64] = if k <= 32 {
            &mut logp[..k]
        } else {
            heap_logp = vec![0.0; k];
            &mut heap_logp
        };
        let mut scores = vec![0.0; k * d];
        let mut inv_ev = [0.0f64; 8];
        let mut proj = [0.0f64; 8];
        for j in 0..k {
            let v = &self.vecs[j];
            let mut quad = 0.0;
            let mut logdet = 0.0;
            for c in 0..d {
                let ev = a * a * self.vals[j][c] + s2;
                inv_ev[c] = 1.0 / ev;
                logdet += ev.ln();
                let mut p = 0.0;
                for r in 0..d {
                    p += v[r * d + c] * (z[r] - a * self.means[j][r]);
                }
                proj[c] = p;
                quad += p * p * inv_ev[c];
            }
            logp[j] = self.log_w[j] - 0.5 * (d as f64 * (2.0 * PI).ln() + logdet + quad);
            for r in 0..d {
                let mut s = 0.0;
                for c in 0..d {
                    s += v[r * d + c] * proj[c] * inv_ev[c];
                }
                scores[j * d + r] = -s;
            }
        }
        let lse = log_sum_exp(logp);
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for j in 0..k {
            let r = (logp[j] - lse).exp();
            logp[j] = r;
            for i in 0..d {
                out[i] += r * scores[j * d + i];
            }
        }
        if let Some(jac) = jac {
            for x in jac.iter_mut() {
                *x = 0.0;
            }
            for j in 0..k {
                let r = logp[j];
                if r == 0.0 {
                    continue;
                }
                let v = &self.vecs[j];
                for c in 0..d {
                    inv_ev[c] = 1.0 / (a * a * self.vals[j][c] + s2);
                }
                for p in 0..d {
                    for q in 0..d {
                        let mut prec = 0.0;
                        for c in 0..d {
                            prec += v[p * d + c] * inv_ev[c] * v[q * d + c];
                        }
                        jac[p * d + q] += r * (-prec + scores[j * d + p] * scores[j * d + q]);
                    }
                }
            }
            for p in 0..d {
                for q in 0..d {
                    jac[p * d + q] -= out[p] * out[q];
                }
            }
        }
    }
}

/// Exact score of a diffused Gaussian mixture.
#[derive(Debug, Clone)]
pub struct MixtureScore {
    law: GaussianMixtureLaw,
    spec: ForwardDiffusionSpec,
    cache: EigenMixture,
    kind: ScoreKind,
}

impl MixtureScore {
    pub fn new(law: GaussianMixtureLaw, spec: ForwardDiffusionSpec) -> Result<Self> {
        let cache = EigenMixture::new(&law)?;
        Ok(Self {
            law,
            spec,
            cache,
            kind: ScoreKind::ExactMixture,
        })
    }

    /// Gaussian geometry built from a local PCA covariance.
    pub fn from_proxy(anchor: Vec<f64>, cov: DMatrix<f64>, spec: ForwardDiffusionSpec) -> Result<Self> {
        let mut s = Self::new(GaussianMixtureLaw::gaussian(anchor, cov)?, spec)?;
        s.kind = ScoreKind::PcaProxy;
        Ok(s)
    }

    pub fn standard_normal(d: usize, spec: ForwardDiffusionSpec) -> Self {
        Self::new(GaussianMixtureLaw::standard_normal(d), spec).expect("valid law")
    }

    pub fn law(&self) -> &GaussianMixtureLaw {
        &self.law
    }

    pub fn spec(&self) -> &ForwardDiffusionSpec {
        &self.spec
    }
}

impl ScoreField for MixtureScore {
    fn dim(&self) -> usize {
        self.law.dim()
    }

    fn kind(&self) -> ScoreKind {
        self.kind
    }

    fn score(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let a = self.spec.alpha(t);
        self.cache.eval(a, self.spec.noise_var(t), z, out, None);
    }

    fn jacobian(&self, z: &[f64], t: f64, out: &mut [f64]) -> bool {
        let a = self.spec.alpha(t);
        let mut s = [0.0f64; 8];
        self.cache.eval(a, self.spec.noise_var(t), z, &mut s[..self.dim()], Some(out));
        true
    }

    fn is_affine(&self) -> bool {
        self.law.len() == 1
    }

    fn fingerprint(&self) -> String {
        format!(
            "mixture:{}:{}",
            serde_json::to_string(&self.law).unwrap_or_default(),
            serde_json::to_string(&self.spec).unwrap_or_default()
        )
    }
}

/// Perturbation families with known drift direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PerturbationMode {
    /// `s + eps·c` with a unit vector `c`.
    LinearTilt { direction: Vec<f64> },
    /// `s + eps·J s` with `J` the unit rotation generator in the first two axes.
    Rotation,
    /// `s + eps·c / sqrt(1 - α_t² + floor²)`: a tilt whose size follows the noise
    /// scale of the diffusion, so that its effect on the flow is proportional to `h`.
    NoiseScaledTilt { direction: Vec<f64>, floor: f64 },
}

impl PerturbationMode {
    pub fn linear_tilt(d: usize) -> Self {
        PerturbationMode::LinearTilt { direction: unit(d) }
    }

    pub fn noise_scaled_tilt(d: usize) -> Self {
        PerturbationMode::NoiseScaledTilt {
            direction: unit(d),
            floor: 1e-3,
        }
    }
}

fn unit(d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d];
    c[0] = 1.0;
    c
}

#[derive(Debug, Clone)]
pub struct PerturbedScore {
    base: Arc<dyn ScoreField>,
    eps: f64,
    mode: PerturbationMode,
    spec: ForwardDiffusionSpec,
}

pub fn perturb_score(
    base: Arc<dyn ScoreField>,
    eps: f64,
    mode: PerturbationMode,
    spec: ForwardDiffusionSpec,
) -> Result<PerturbedScore> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::config("eps", "perturbation amplitude must be nonnegative"));
    }
    let d = base.dim();
    match &mode {
        PerturbationMode::LinearTilt { direction } | PerturbationMode::NoiseScaledTilt { direction, .. } => {
            let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if direction.len() != d || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::config("direction", "must be a unit vector of the field dimension"));
            }
        }
        PerturbationMode::Rotation => {}
    }
    if let PerturbationMode::NoiseScaledTilt { floor, .. } = &mode {
        if !(*floor > 0.0) {
            return Err(Error::config("floor", "must be positive"));
        }
    }
    Ok(PerturbedScore { base, eps, mode, spec })
}

impl PerturbedScore {
    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl ScoreField for PerturbedScore {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn kind(&self) -> ScoreKind {
        ScoreKind::Perturbed
    }

    fn score(&self, z: &[f64], t: f64, out: &mut [f64]) {
        self.base.score(z, t, out);
        if self.eps == 0.0 {
            return;
        }
        match &self.mode {
            PerturbationMode::LinearTilt { direction } => {
                for (o, c) in out.iter_mut().zip(direction) {
                    *o += self.eps * c;
                }
            }
            PerturbationMode::NoiseScaledTilt { direction, floor } => {
                let scale = self.eps / (self.spec.noise_var(t) + floor * floor).sqrt();
                for (o, c) in out.iter_mut().zip(direction) {
                    *o += scale * c;
                }
            }
            PerturbationMode::Rotation => {
                if out.len() >= 2 {
                    let (s0, s1) = (out[0], out[1]);
                    out[0] = s0 - self.eps * s1;
                    out[1] = s1 + self.eps * s0;
                }
            }
        }
    }

    fn jacobian(&self, z: &[f64], t: f64, out: &mut [f64]) -> bool {
        if !self.base.jacobian(z, t, out) {
            return false;
        }
        if let PerturbationMode::Rotation = self.mode {
            let d = self.dim();
            if d >= 2 && self.eps != 0.0 {
                for q in 0..d {
                    let (r0, r1) = (out[q], out[d + q]);
                    out[q] = r0 - self.eps * r1;
                    out[d + q] = r1 + self.eps * r0;
                }
            }
        }
        true
    }

    fn is_affine(&self) -> bool {
        self.base.is_affine()
    }

    fn fingerprint(&self) -> String {
        format!(
            "perturbed:{}:{}:{}",
            self.eps,
            serde_json::to_string(&self.mode).unwrap_or_default(),
            self.base.fingerprint()
        )
    }
}

/// Neighbourhood-PCA covariance at one anchor.
#[derive(Debug, Clone)]
pub struct LocalGeometryProxy {
    pub k_nn: usize,
    pub ridge: f64,
    pub covariance: DMatrix<f64>,
}

impl LocalGeometryProxy {
    /// Eigen-decomposition, eigenvalues descending.
    pub fn principal_axes(&self) -> (Vec<f64>, DMatrix<f64>) {
        let e = symmetric_eigen(&self.covariance);
        let d = e.eigenvalues.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        let vals = order.iter().map(|&k| e.eigenvalues[k]).collect();
        let vecs = DMatrix::from_fn(d, d, |r, c| e.eigenvectors[(r, order[c])]);
        (vals, vecs)
    }
}

/// Ridge choice for [`fit_pca_proxy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `1e-3 · trace(C) / d` of the neighbourhood covariance `C`.
    Auto,
    Fixed(f64),
}

/// Empirical covariance of the `k_nn` arm outcomes nearest to `anchor`, plus `λ I`.
/// `outcomes` are row-major with `anchor.len()` columns.
pub fn fit_pca_proxy_points(outcomes: &[f64], anchor: &[f64], k_nn: usize, ridge: Ridge) -> Result<LocalGeometryProxy> {
    let d = anchor.len();
    let available = outcomes.len() / d;
    if k_nn < 2 || available < k_nn {
        return Err(Error::NotEnoughNeighbors {
            available,
            requested: k_nn,
        });
    }
    let mut dist: Vec<(f64, usize)> = outcomes
        .chunks(d)
        .enumerate()
        .map(|(i, row)| (row.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    if k_nn < available {
        dist.select_nth_unstable_by(k_nn - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }
    let mut nb = Vec::with_capacity(k_nn * d);
    let mut chosen: Vec<usize> = dist[..k_nn].iter().map(|p| p.1).collect();
    chosen.sort_unstable();
    for i in chosen {
        nb.extend_from_slice(&outcomes[i * d..(i + 1) * d]);
    }
    let (_, mut cov) = mean_cov(&nb, d);
    // population normalisation so that k_nn = arm size reproduces the full covariance convention
    cov *= (k_nn - 1) as f64 / k_nn as f64;
    let lambda = match ridge {
        Ridge::Auto => 1e-3 * cov.trace() / d as f64,
        Ridge::Fixed(l) => {
            if !(l >= 0.0) {
                return Err(Error::config("ridge", "must be nonnegative"));
            }
            l
        }
    };
    cov += DMatrix::identity(d, d) * lambda;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(LocalGeometryProxy {
        k_nn,
        ridge: lambda,
        covariance: cov,
    })
}

/// [`fit_pca_proxy_points`] on the outcomes of `arm` in `batch`.
pub fn fit_pca_proxy(
    batch: &crate::domain::ObservationBatch,
    arm: i64,
    anchor: &[f64],
    k_nn: usize,
    ridge: Ridge,
) -> Result<LocalGeometryProxy> {
    if anchor.len() != batch.d {
        return Err(Error::Data("anchor dimension differs from outcome dimension".into()));
    }
    let mut pts = Vec::new();
    for i in batch.arm_indices(arm) {
        pts.extend_from_slice(batch.y_row(i));
    }
    fit_pca_proxy_points(&pts, anchor, k_nn, ridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPolicy;

    fn two_comp() -> GaussianMixtureLaw {
        GaussianMixtureLaw::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![1.2, -0.4]],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 0.6]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gaussian_scores() {
        let sn = GaussianMixtureLaw::standard_normal(3);
        let s = mixture_score(&sn, &[0.3, -1.0, 2.0]).unwrap();
        assert!((s[0] + 0.3).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14 && (s[2] + 2.0).abs() < 1e-14);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = GaussianMixtureLaw::gaussian(vec![1.0, -1.0], cov.clone()).unwrap();
        let z = [0.2, 0.7];
        let s = mixture_score(&g, &z).unwrap();
        let inv = cov.try_inverse().unwrap();
        let want = -(inv * nalgebra::DVector::from_vec(vec![z[0] - 1.0, z[1] + 1.0]));
        assert!((s[0] - want[0]).abs() < 1e-12 && (s[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn mixture_score_matches_finite_difference() {
        let law = two_comp();
        let z = [0.4, -0.3];
        let s = mixture_score(&law, &z).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fd = (law.log_density(&zp).unwrap() - law.log_density(&zm).unwrap()) / (2.0 * h);
            assert!((fd - s[j]).abs() < 1e-6, "{fd} vs {}", s[j]);
        }
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let spec = ForwardDiffusionSpec::default();
        let f = MixtureScore::new(two_comp(), spec).unwrap();
        let z = [0.1, 0.2];
        let t = 0.05;
        let mut jac = [0.0; 4];
        assert!(f.jacobian(&z, t, &mut jac));
        let h = 1e-6;
        for q in 0..2 {
            let (mut zp, mut zm) = (z, z);
            zp[q] += h;
            zm[q] -= h;
            let (mut sp, mut sm) = ([0.0; 2], [0.0; 2]);
            f.score(&zp, t, &mut sp);
            f.score(&zm, t, &mut sm);
            for p in 0..2 {
                let fd = (sp[p] - sm[p]) / (2.0 * h);
                assert!((fd - jac[p * 2 + q]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn standard_normal_is_fixed_point() {
        let spec = ForwardDiffusionSpec::default();
        let sn = GaussianMixtureLaw::standard_normal(2);
        for t in [0.0, 0.1, 0.5, 1.0] {
            let dl = sn.diffused(&spec, t).unwrap();
            let c = dl.cov(0);
            assert!((c - DMatrix::identity(2, 2)).amax() < 1e-12);
        }
        assert_eq!(two_comp().diffused(&spec, 0.0).unwrap(), two_comp());
    }

    #[test]
    fn perturbation_contracts() {
        let spec = ForwardDiffusionSpec::default();
        let base: Arc<dyn ScoreField> = Arc::new(MixtureScore::standard_normal(2, spec));
        let p0 = perturb_score(base.clone(), 0.0, PerturbationMode::linear_tilt(2), spec).unwrap();
        let p1 = perturb_score(base.clone(), 0.1, PerturbationMode::linear_tilt(2), spec).unwrap();
        let mut rng = SeedPolicy::new(3).stream("probe");
        for _ in 0..100 {
            let z = [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
            let t = rng.random::<f64>();
            let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
            base.score(&z, t, &mut a);
            p0.score(&z, t, &mut b);
            assert_eq!(a, b);
        }
        let mut s = [0.0; 2];
        p1.score(&[0.0, 0.0], 0.3, &mut s);
        assert!((s[0] - 0.1).abs() < 1e-12 && s[1].abs() < 1e-12);
        assert!(perturb_score(base, -1.0, PerturbationMode::Rotation, spec).is_err());
    }

    #[test]
    fn proxy_cases() {
        // identical neighbours → pure ridge
        let pts = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let p = fit_pca_proxy_points(&pts, &[0.0, 0.0], 3, Ridge::Fixed(0.01)).unwrap();
        assert!((p.covariance.clone() - DMatrix::identity(2, 2) * 0.01).amax() < 1e-15);
        assert!(matches!(
            fit_pca_proxy_points(&pts, &[0.0, 0.0], 4, Ridge::Auto),
            Err(Error::NotEnoughNeighbors { .. })
        ));
        // full arm → full covariance + ridge
        let law = two_comp();
        let pts = law.sample(200, &mut SeedPolicy::new(5).stream("x")).unwrap();
        let p = fit_pca_proxy_points(&pts, &[0.0, 0.0], 200, Ridge::Fixed(0.5)).unwrap();
        let (_, mut full) = mean_cov(&pts, 2);
        full *= 199.0 / 200.0;
        assert!((p.covariance - full - DMatrix::identity(2, 2) * 0.5).amax() < 1e-12);
    }

    #[test]
    fn proxy_aligns_with_segment() {
        let dir = [30f64.to_radians().cos(), 30f64.to_radians().sin()];
        let mut rng = SeedPolicy::new(9).stream("line");
        let pts: Vec<f64> = (0..400)
            .flat_map(|_| {
                let s: f64 = rng.random::<f64>() * 2.0 - 1.0;
                [s * dir[0], s * dir[1]]
            })
            .collect();
        let p = fit_pca_proxy_points(&pts, &[0.0, 0.0], 100, Ridge::Fixed(1e-3)).unwrap();
        let (_, vecs) = p.principal_axes();
        let cos = (vecs[(0, 0)] * dir[0] + vecs[(1, 0)] * dir[1]).abs();
        assert!(cos > 5f64.to_radians().cos());
    }

    #[test]
    fn law_json_round_trip() {
        let law = two_comp();
        let back = GaussianMixtureLaw::from_json(&law.to_json().unwrap()).unwrap();
        assert_eq!(law, back);
        assert!(GaussianMixtureLaw::from_json(r#"{"weights":[0.5],"means":[[0.0]],"covariances":[[[1.0]]]}"#).is_err());
    }
}
