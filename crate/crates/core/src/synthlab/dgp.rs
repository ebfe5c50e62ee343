//! Confounded data-generating processes with Gaussian-mixture outcome laws.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::ObservationBatch;
use crate::error::{Error, Result};
use crate::nuisance::sigmoid;
use crate::rng::SeedPolicy;
use crate::score::{pick, GaussianMixtureLaw};

pub const PRESETS: [&str; 4] = ["gauss2d", "mix2d", "thin2d", "ambient10"];

/// One component of `Y | X = x, A = a`: `N(mean + loading·x, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// `d × k`.
    pub loading: Vec<Vec<f64>>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmLaw {
    pub arm: i64,
    pub components: Vec<ConditionalComponent>,
}

/// Covariates, a logistic treatment model and per-arm Gaussian-mixture outcomes.
///
/// The first `binary_covariates` coordinates of `X` are independent signs
/// (`±1` with probability ½), the rest are standard normal. Treatment follows
/// `P(A = 1 | x) = σ(c₀ + s·γᵀx)` with `γ` supported on the sign coordinates, so
/// the logit is bounded and positivity can be checked on finitely many points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDgp {
    pub name: String,
    pub d: usize,
    pub d_star: usize,
    pub k: usize,
    /// `s`.
    pub confounding: f64,
    /// `c₀`.
    pub propensity_intercept: f64,
    /// `γ`.
    pub propensity_direction: Vec<f64>,
    pub pi_min: f64,
    #[serde(default)]
    pub binary_covariates: usize,
    pub arms: Vec<ArmLaw>,
    /// Rows map ambient outcomes to evaluation coordinates.
    #[serde(default)]
    pub projection: Option<Vec<Vec<f64>>>,
}

fn mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn diag(v: &[f64]) -> Vec<Vec<f64>> {
    rows(&DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)))
}

fn comp(weight: f64, mean: Vec<f64>, loading: Vec<Vec<f64>>, cov: Vec<Vec<f64>>) -> ConditionalComponent {
    ConditionalComponent { weight, mean, loading, cov }
}

impl SyntheticDgp {
    pub fn preset(name: &str) -> Result<Self> {
        let base = |name: &str, d: usize, d_star: usize, arms: Vec<ArmLaw>| SyntheticDgp {
            name: name.into(),
            d,
            d_star,
            k: 2,
            confounding: 1.5,
            propensity_intercept: 0.0,
            propensity_direction: vec![1.0, 0.0],
            pi_min: 0.1,
            binary_covariates: 1,
            arms,
            projection: None,
        };
        let dgp = match name {
            "gauss2d" => {
                let load = vec![vec![0.6, 0.0], vec![0.3, 0.2]];
                let cov = vec![vec![0.5, 0.1], vec![0.1, 0.4]];
                base(
                    name,
                    2,
                    2,
                    vec![
                        ArmLaw { arm: 0, components: vec![comp(1.0, vec![-0.5, 0.0], load.clone(), cov.clone())] },
                        ArmLaw { arm: 1, components: vec![comp(1.0, vec![0.5, 0.0], load, cov)] },
                    ],
                )
            }
            "mix2d" => base(
                name,
                2,
                2,
                vec![
                    ArmLaw {
                        arm: 0,
                        components: vec![comp(
                            1.0,
                            vec![-0.5, 0.0],
                            vec![vec![0.4, 0.0], vec![0.2, 0.0]],
                            vec![vec![0.5, 0.0], vec![0.0, 0.5]],
                        )],
                    },
                    ArmLaw {
                        arm: 1,
                        components: vec![
                            comp(
                                0.45,
                                vec![-1.0, -0.3],
                                vec![vec![0.4, 0.0], vec![0.2, 0.0]],
                                vec![vec![0.25, 0.05], vec![0.05, 0.2]],
                            ),
                            comp(
                                0.55,
                                vec![1.0, 0.5],
                                vec![vec![0.4, 0.0], vec![0.0, 0.2]],
                                vec![vec![0.3, -0.05], vec![-0.05, 0.25]],
                            ),
                        ],
                    },
                ],
            ),
            "thin2d" => {
                let load = vec![vec![0.6, 0.0], vec![0.0, 0.0]];
                base(
                    name,
                    2,
                    1,
                    vec![
                        ArmLaw { arm: 0, components: vec![comp(1.0, vec![-0.5, 0.0], load.clone(), diag(&[0.7, 1e-4]))] },
                        ArmLaw { arm: 1, components: vec![comp(1.0, vec![0.0, 0.0], load, diag(&[0.7, 1e-4]))] },
                    ],
                )
            }
            "ambient10" => {
                let d = 10;
                let mut load = vec![vec![0.0, 0.0]; d];
                load[0] = vec![0.6, 0.0];
                load[1] = vec![0.0, 0.3];
                let mut var = vec![1e-4; d];
                var[0] = 0.6;
                var[1] = 0.5;
                let mut m1 = vec![0.0; d];
                m1[0] = 0.3;
                let mut m0 = vec![0.0; d];
                m0[0] = -0.3;
                let mut dgp = base(
                    name,
                    d,
                    2,
                    vec![
                        ArmLaw { arm: 0, components: vec![comp(1.0, m0, load.clone(), diag(&var))] },
                        ArmLaw { arm: 1, components: vec![comp(1.0, m1, load, diag(&var))] },
                    ],
                );
                let mut e0 = vec![0.0; d];
                e0[0] = 1.0;
                let w = 1.0 / ((d - 2) as f64).sqrt();
                let inactive: Vec<f64> = (0..d).map(|j| if j >= 2 { w } else { 0.0 }).collect();
                dgp.projection = Some(vec![e0, inactive]);
                dgp
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
                ))
            }
        };
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn with_confounding(mut self, s: f64) -> Self {
        self.confounding = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_star == 0 || self.d_star > self.d {
            return Err(Error::config("d_star", "need 1 ≤ d_star ≤ d"));
        }
        if self.propensity_direction.len() != self.k {
            return Err(Error::config("propensity_direction", "length must equal k"));
        }
        if !(self.pi_min > 0.0 && self.pi_min < 0.5) {
            return Err(Error::config("pi_min", "must lie in (0, 0.5)"));
        }
        if !self.confounding.is_finite() || !self.propensity_intercept.is_finite() {
            return Err(Error::config("confounding", "must be finite"));
        }
        if self.binary_covariates > self.k.min(16) {
            return Err(Error::config("binary_covariates", "at most min(k, 16)"));
        }
        if self.propensity_direction[self.binary_covariates..].iter().any(|g| *g != 0.0) {
            return Err(Error::config(
                "propensity_direction",
                "must vanish outside the binary covariates so the logit stays bounded",
            ));
        }
        let labels: Vec<i64> = self.arms.iter().map(|a| a.arm).collect();
        if labels != [0, 1] {
            return Err(Error::config("arms", "expected exactly the arms 0 and 1, in order"));
        }
        for arm in &self.arms {
            for c in &arm.components {
                if c.loading.len() != self.d || c.loading.iter().any(|r| r.len() != self.k) {
                    return Err(Error::config("loading", format!("arm {} loading must be d × k", arm.arm)));
                }
            }
            self.conditional_law(arm.arm, &vec![0.0; self.k])?;
        }
        if let Some(p) = &self.projection {
            if p.is_empty() || p.len() > crate::domain::MAX_EVAL_DIM || p.iter().any(|r| r.len() != self.d) {
                return Err(Error::config("projection", "rows must have length d, at most 3 rows"));
            }
        }
        Ok(())
    }

    /// Evaluation dimension.
    pub fn eval_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.d, Vec::len)
    }

    pub fn projection_matrix(&self) -> DMatrix<f64> {
        match &self.projection {
            Some(p) => mat(p),
            None => DMatrix::identity(self.d, self.d),
        }
    }

    fn arm_law(&self, arm: i64) -> Result<&ArmLaw> {
        self.arms.iter().find(|a| a.arm == arm).ok_or(Error::EmptyArm(arm))
    }

    /// `P(A = 1 | x)`.
    pub fn treat_prob(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.propensity_intercept
            + self.confounding * self.propensity_direction.iter().zip(x).map(|(g, v)| g * v).sum::<f64>();
        sigmoid(lin)
    }

    /// Smallest arm propensity over the support of `X`.
    pub fn min_propensity(&self) -> f64 {
        sign_patterns(self.binary_covariates, self.k)
            .map(|x| {
                let p = self.treat_prob(&x);
                p.min(1.0 - p)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = if j < self.binary_covariates {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            } else {
                StandardNormal.sample(rng)
            };
        }
    }

    /// `P(A = arm | x)`.
    pub fn propensity(&self, arm: i64, x: &[f64]) -> f64 {
        let p = self.treat_prob(x);
        if arm == 1 {
            p
        } else {
            1.0 - p
        }
    }

    /// Ambient law of `Y | X = x, A = arm`.
    pub fn conditional_law(&self, arm: i64, x: &[f64]) -> Result<GaussianMixtureLaw> {
        let law = self.arm_law(arm)?;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in &law.components {
            let b = mat(&c.loading);
            let bx = &b * nalgebra::DVector::from_column_slice(x);
            weights.push(c.weight);
            means.push(c.mean.iter().zip(bx.iter()).map(|(m, v)| m + v).collect());
            covs.push(mat(&c.cov));
        }
        GaussianMixtureLaw::new(weights, means, covs)
    }

    /// Ambient counterfactual law `P_a`, the arm's conditional law averaged over `X`.
    pub fn counterfactual_law(&self, arm: i64) -> Result<GaussianMixtureLaw> {
        let law = self.arm_law(arm)?;
        let cond = ConditionalLaw {
            weights: law.components.iter().map(|c| c.weight).collect(),
            means: law.components.iter().map(|c| c.mean.clone()).collect(),
            loadings: law.components.iter().map(|c| mat(&c.loading)).collect(),
            covs: law.components.iter().map(|c| mat(&c.cov)).collect(),
            binary: self.binary_covariates,
        };
        cond.marginal().to_law()
    }

    /// Counterfactual law in evaluation coordinates.
    pub fn eval_counterfactual_law(&self, arm: i64) -> Result<GaussianMixtureLaw> {
        let p = self.projection_matrix();
        self.counterfactual_law(arm)?.affine_image(&p, &vec![0.0; p.nrows()])
    }

    /// Conditional law in evaluation coordinates, as `(weights, means, loadings, covs)`.
    pub fn eval_conditional(&self, arm: i64) -> Result<ConditionalLaw> {
        let p = self.projection_matrix();
        let law = self.arm_law(arm)?;
        Ok(ConditionalLaw {
            weights: law.components.iter().map(|c| c.weight).collect(),
            means: law
                .components
                .iter()
                .map(|c| (&p * nalgebra::DVector::from_column_slice(&c.mean)).iter().copied().collect())
                .collect(),
            loadings: law.components.iter().map(|c| &p * mat(&c.loading)).collect(),
            covs: law.components.iter().map(|c| &p * mat(&c.cov) * p.transpose()).collect(),
            binary: self.binary_covariates,
        })
    }

    /// `n` i.i.d. units drawn from the stream `data` of `seed`.
    pub fn generate(&self, n: usize, seed: &SeedPolicy) -> Result<ObservationBatch> {
        self.generate_from(n, &mut seed.stream("data"))
    }

    pub fn generate_from<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ObservationBatch> {
        if n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        let (k, d) = (self.k, self.d);
        let prepared: Vec<Vec<(f64, Vec<f64>, DMatrix<f64>, DMatrix<f64>)>> = self
            .arms
            .iter()
            .map(|arm| {
                arm.components
                    .iter()
                    .map(|c| {
                        let l = mat(&c.cov)
                            .cholesky()
                            .ok_or_else(|| Error::Decomposition(format!("arm {} covariance", arm.arm)))?
                            .l();
                        Ok((c.weight, c.mean.clone(), mat(&c.loading), l))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut x = Vec::with_capacity(n * k);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        let mut xi = vec![0.0; k];
        for _ in 0..n {
            self.draw_covariates(rng, &mut xi);
            let ai = i64::from(rng.random::<f64>() < self.treat_prob(&xi));
            let comps = &prepared[ai as usize];
            let weights: Vec<f64> = comps.iter().map(|c| c.0).collect();
            let (_, mean, load, l) = &comps[pick(&weights, rng.random::<f64>())];
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            for r in 0..d {
                let mut s = mean[r];
                for c in 0..k {
                    s += load[(r, c)] * xi[c];
                }
                for c in 0..=r {
                    s += l[(r, c)] * z[c];
                }
                y.push(s);
            }
            x.extend_from_slice(&xi);
            a.push(ai);
        }
        ObservationBatch::with_labels(k, d, x, a, y, [0, 1].into_iter().collect())
    }

    /// Smallest arm propensity over `draws` covariate draws.
    pub fn positivity_audit(&self, draws: usize, seed: &SeedPolicy) -> PositivityAudit {
        let mut rng = seed.stream("positivity");
        let mut min_pi = f64::INFINITY;
        let mut x = vec![0.0; self.k];
        for _ in 0..draws {
            self.draw_covariates(&mut rng, &mut x);
            let p = self.treat_prob(&x);
            min_pi = min_pi.min(p.min(1.0 - p));
        }
        PositivityAudit {
            draws,
            min_pi,
            pi_min: self.pi_min,
            passes: min_pi >= self.pi_min,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PositivityAudit {
    pub draws: usize,
    pub min_pi: f64,
    pub pi_min: f64,
    pub passes: bool,
}

/// All `x` with the first `b` coordinates in `{-1, 1}` and the rest zero.
fn sign_patterns(b: usize, k: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..1usize << b).map(move |mask| {
        (0..k)
            .map(|j| if j >= b { 0.0 } else if mask >> j & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    })
}

/// `Y | X = x ~ Σ_j w_j N(m_j + B_j x, C_j)` in evaluation coordinates.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub loadings: Vec<DMatrix<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// Leading sign covariates; the rest are standard normal.
    pub binary: usize,
}

impl ConditionalLaw {
    /// Marginal over `X`: one component per sign pattern, with the Gaussian
    /// covariates folded into the covariance.
    pub fn marginal(&self) -> ConditionalLaw {
        let r = self.means.first().map_or(0, Vec::len);
        let b = self.binary;
        let scale = 0.5f64.powi(b as i32);
        let mut out = ConditionalLaw {
            weights: Vec::new(),
            means: Vec::new(),
            loadings: Vec::new(),
            covs: Vec::new(),
            binary: 0,
        };
        for j in 0..self.weights.len() {
            let load = &self.loadings[j];
            let cont = load.columns(b, load.ncols() - b);
            let cov = &self.covs[j] + cont * cont.transpose();
            for s in sign_patterns(b, load.ncols()) {
                let shift = load * nalgebra::DVector::from_column_slice(&s);
                out.weights.push(self.weights[j] * scale);
                out.means.push(self.means[j].iter().zip(shift.iter()).map(|(m, v)| m + v).collect());
                out.loadings.push(DMatrix::zeros(r, 0));
                out.covs.push(cov.clone());
            }
        }
        out
    }

    fn to_law(&self) -> Result<GaussianMixtureLaw> {
        GaussianMixtureLaw::new(self.weights.clone(), self.means.clone(), self.covs.clone())
    }

    pub fn from_law(law: &GaussianMixtureLaw) -> ConditionalLaw {
        let r = law.dim();
        ConditionalLaw {
            weights: law.weights.clone(),
            means: law.means.clone(),
            loadings: (0..law.len()).map(|_| DMatrix::zeros(r, 0)).collect(),
            covs: (0..law.len()).map(|j| law.cov(j)).collect(),
            binary: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_pass_positivity() {
        for name in PRESETS {
            let dgp = SyntheticDgp::preset(name).unwrap();
            let audit = dgp.positivity_audit(100_000, &SeedPolicy::new(1));
            assert!(audit.passes, "{name}: {audit:?}");
            let json = serde_json::to_string(&dgp).unwrap();
            let back: SyntheticDgp = serde_json::from_str(&json).unwrap();
            assert_eq!(back, dgp);
        }
        assert!(SyntheticDgp::preset("nope").unwrap_err().is_config());
    }

    #[test]
    fn no_confounding_means_independent_treatment() {
        let dgp = SyntheticDgp::preset("gauss2d").unwrap().with_confounding(0.0);
        let n = 10_000;
        let b = dgp.generate(n, &SeedPolicy::new(3)).unwrap();
        for j in 0..b.k {
            let xs: Vec<f64> = (0..n).map(|i| b.x_row(i)[j]).collect();
            let az: Vec<f64> = b.a.iter().map(|&v| v as f64).collect();
            let mx = xs.iter().sum::<f64>() / n as f64;
            let ma = az.iter().sum::<f64>() / n as f64;
            let cov: f64 = xs.iter().zip(&az).map(|(x, a)| (x - mx) * (a - ma)).sum::<f64>() / n as f64;
            let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
            let sa = (ma * (1.0 - ma)).sqrt();
            let corr = cov / (sx * sa);
            // s.e. of a null correlation is about n^{-1/2}
            assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
        }
    }

    #[test]
    fn arm_conditional_mean_matches_formula() {
        let dgp = SyntheticDgp::preset("gauss2d").unwrap();
        let n = 20_000;
        let b = dgp.generate(n, &SeedPolicy::new(5)).unwrap();
        // E[Y | A=1] = m + B E[X | A=1]; estimate E[X | A=1] from the sample itself
        let idx = b.arm_indices(1);
        let m = idx.len() as f64;
        let ex: Vec<f64> = (0..b.k).map(|j| idx.iter().map(|&i| b.x_row(i)[j]).sum::<f64>() / m).collect();
        let law = dgp.conditional_law(1, &ex).unwrap();
        for c in 0..b.d {
            let ys: Vec<f64> = idx.iter().map(|&i| b.y_row(i)[c]).collect();
            let mean = ys.iter().sum::<f64>() / m;
            let sd = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt();
            assert!((mean - law.means[0][c]).abs() < 3.0 * sd / m.sqrt(), "coord {c}");
        }
    }

    #[test]
    fn projected_laws_agree() {
        let dgp = SyntheticDgp::preset("ambient10").unwrap();
        assert_eq!(dgp.eval_dim(), 2);
        let direct = dgp.eval_counterfactual_law(1).unwrap();
        let cond = dgp.eval_conditional(1).unwrap().marginal();
        assert!((direct.cov(0) - &cond.covs[0]).amax() < 1e-12);
        // thin projected coordinate: 8 axes of variance 1e-4 averaged by 1/√8 weights
        assert!((direct.cov(0)[(1, 1)] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn sign_covariates_give_exact_marginal_and_positivity() {
        let dgp = SyntheticDgp::preset("mix2d").unwrap();
        assert!((dgp.min_propensity() - sigmoid(-1.5)).abs() < 1e-15);
        let law = dgp.counterfactual_law(1).unwrap();
        assert_eq!(law.len(), 4);
        // draw from P_1 directly by forcing treatment
        let mut forced = dgp.clone().with_confounding(0.0);
        forced.propensity_intercept = 40.0;
        let n = 40_000;
        let b = forced.generate(n, &SeedPolicy::new(9)).unwrap();
        assert!(b.a.iter().all(|&a| a == 1));
        let mean_law: Vec<f64> = (0..2)
            .map(|c| (0..law.len()).map(|j| law.weights[j] * law.means[j][c]).sum())
            .collect();
        for c in 0..2 {
            let ys: Vec<f64> = (0..n).map(|i| b.y_row(i)[c]).collect();
            let m = ys.iter().sum::<f64>() / n as f64;
            let sd = (ys.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!((m - mean_law[c]).abs() < 4.0 * sd / (n as f64).sqrt(), "coord {c}: {m} vs {}", mean_law[c]);
        }
        let mut bad = dgp.clone();
        bad.propensity_direction = vec![1.0, 0.5];
        assert!(bad.validate().unwrap_err().is_config());
    }
}
