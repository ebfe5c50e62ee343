//! End-to-end replication runner: generate, fit nuisances, estimate, score against
//! the matched population target, aggregate.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::ForwardDiffusionSpec;
use crate::domain::{fmt_f64, make_crossfit_plan, make_grid, EvaluationRegion, Grid, ObservationBatch};
use crate::error::{Error, Result};
use crate::estimators::{
    default_test_class, dis_estimate, dss_estimate, plugin_estimate, stein_estimate, treated_only_stein, DssFloor,
    EstimateOptions, GridEstimate, PluginMode, SteinEstimate, TestField,
};
use crate::inference::{density_band, stein_band, BandResult};
use crate::kernel::{GridKernel, IsoKernel, PcaProxyConfig, PcaProxyKernel, SmoothingKernel, TransportedKernel};
use crate::nuisance::{fit_localized_regressions, fit_propensity, NuisanceView, OracleNuisance, RegressionRidge};
use crate::par;
use crate::peakiness::{csv_err, peakiness, PeakinessReport};
use crate::plot::{loglog_svg, Series};
use crate::rng::SeedPolicy;
use crate::score::{perturb_score, MixtureScore, PerturbationMode, ScoreField};

use super::dgp::{ConditionalLaw, SyntheticDgp};
use super::drift::{drift_diagnostic, DriftTable};
use super::metrics::{matched_ise, rate_from_replications, score_mse, RateCurve};
use super::oracle::{KernelOracle, PopulationTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceSource {
    /// Cross-fitted logistic propensity and ridge-affine localized regressions.
    #[default]
    Crossfit,
    /// Exact propensity and conditional means from the design.
    Oracle,
}

/// `h_n = c · n^exponent`; when `c` is absent it is chosen so that `h` at the
/// smallest `n` spans `cells` grid cells along the widest axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthRule {
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default = "default_cells")]
    pub cells: f64,
}

fn default_exponent() -> f64 {
    -0.2
}
fn default_cells() -> f64 {
    3.0
}

impl Default for BandwidthRule {
    fn default() -> Self {
        Self {
            c: None,
            exponent: default_exponent(),
            cells: default_cells(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakinessConfig {
    pub h: Vec<f64>,
    #[serde(default = "default_peak_samples")]
    pub samples: usize,
    /// Kernel names (`iso`, `pca`, `transported`).
    #[serde(default = "default_peak_kernels")]
    pub kernels: Vec<String>,
    #[serde(default)]
    pub include_score: bool,
}

fn default_peak_samples() -> usize {
    400
}
fn default_peak_kernels() -> Vec<String> {
    vec!["iso".into(), "pca".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub h: Vec<f64>,
    pub eps: Vec<f64>,
    #[serde(default = "default_drift_samples")]
    pub samples: usize,
    /// Probe points per axis (a coarse grid over the interior half of the region).
    #[serde(default = "default_probes")]
    pub probes_per_axis: usize,
    #[serde(default)]
    pub mode: Option<PerturbationMode>,
}

fn default_drift_samples() -> usize {
    20_000
}
fn default_probes() -> usize {
    5
}

/// Experiment configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub preset: String,
    #[serde(default)]
    pub confounding: Option<f64>,
    #[serde(default = "default_arm")]
    pub arm: i64,
    /// `kind:kernel`, kind in `dis`, `plugin`, `plugin-ipw`, `dss`, `stein`,
    /// `treated-only-stein`; kernel in `iso`, `pca`, `transported`.
    pub estimators: Vec<String>,
    pub n: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bandwidth: BandwidthRule,
    #[serde(default = "default_gpa")]
    pub grid_points_per_axis: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub nuisance: NuisanceSource,
    /// Ridge for the localized regressions; `1e-6·n` when absent.
    #[serde(default)]
    pub ridge: Option<f64>,
    #[serde(default)]
    pub pca: PcaProxyConfig,
    #[serde(default)]
    pub diffusion: ForwardDiffusionSpec,
    /// Interior share excluded on each side when scoring score estimates.
    #[serde(default = "default_interior")]
    pub interior: f64,
    #[serde(default)]
    pub bands: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_multipliers")]
    pub multipliers: usize,
    #[serde(default)]
    pub peakiness: Option<PeakinessConfig>,
    #[serde(default)]
    pub drift: Option<DriftConfig>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_arm() -> i64 {
    1
}
fn default_replications() -> usize {
    50
}
fn default_gpa() -> usize {
    30
}
fn default_margin() -> f64 {
    0.1
}
fn default_folds() -> usize {
    5
}
fn default_clip() -> f64 {
    0.05
}
fn default_interior() -> f64 {
    0.2
}
fn default_alpha() -> f64 {
    0.05
}
fn default_multipliers() -> usize {
    crate::inference::DEFAULT_MULTIPLIERS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Dis,
    Plugin,
    PluginIpw,
    Dss,
    Stein,
    TreatedOnlyStein,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    Iso,
    Pca,
    Transported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EstimatorSpec {
    pub name: String,
    pub kind: EstimatorKind,
    pub kernel: KernelChoice,
}

impl EstimatorSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config("estimators", format!("cannot parse `{s}` (expected kind:kernel)"));
        let (kind, kernel) = s.split_once(':').ok_or_else(bad)?;
        let kind = match kind {
            "dis" => EstimatorKind::Dis,
            "plugin" => EstimatorKind::Plugin,
            "plugin-ipw" => EstimatorKind::PluginIpw,
            "dss" => EstimatorKind::Dss,
            "stein" => EstimatorKind::Stein,
            "treated-only-stein" => EstimatorKind::TreatedOnlyStein,
            _ => return Err(bad()),
        };
        Ok(Self {
            name: s.to_string(),
            kind,
            kernel: parse_kernel(kernel).map_err(|_| bad())?,
        })
    }

    fn needs_grad(&self) -> bool {
        matches!(self.kind, EstimatorKind::Dss | EstimatorKind::Stein | EstimatorKind::TreatedOnlyStein)
    }
}

fn parse_kernel(s: &str) -> Result<KernelChoice> {
    match s {
        "iso" => Ok(KernelChoice::Iso),
        "pca" => Ok(KernelChoice::Pca),
        "transported" => Ok(KernelChoice::Transported),
        other => Err(Error::config("kernel", format!("unknown kernel `{other}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        Self::from_value(v)
    }

    /// Accepts either a config document or a manifest containing one under `config`.
    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        let v = match v {
            serde_json::Value::Object(ref m) if m.contains_key("config") && m.contains_key("config_hash") => m["config"].clone(),
            other => other,
        };
        let cfg: Self = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        SyntheticDgp::preset(&self.preset)?;
        if self.estimators.is_empty() && self.peakiness.is_none() && self.drift.is_none() {
            return Err(Error::config("estimators", "nothing to run"));
        }
        for e in &self.estimators {
            EstimatorSpec::parse(e)?;
        }
        if !self.estimators.is_empty() && (self.n.is_empty() || self.n.windows(2).any(|w| w[0] >= w[1])) {
            return Err(Error::config("n", "must be a nonempty strictly increasing list"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds", "need at least 2 folds"));
        }
        if self.grid_points_per_axis < 2 {
            return Err(Error::config("grid_points_per_axis", "must be at least 2"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::config("margin", "must be nonnegative"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", "must lie in (0,1)"));
        }
        if !(0.0..0.5).contains(&self.interior) {
            return Err(Error::config("interior", "must lie in [0, 0.5)"));
        }
        if let Some(c) = self.bandwidth.c {
            if !(c > 0.0) {
                return Err(Error::config("bandwidth.c", "must be positive"));
            }
        }
        if !(self.bandwidth.cells > 0.0) || !self.bandwidth.exponent.is_finite() {
            return Err(Error::config("bandwidth", "cells must be positive and exponent finite"));
        }
        if let Some(p) = &self.peakiness {
            for k in &p.kernels {
                parse_kernel(k)?;
            }
        }
        self.diffusion.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        crate::domain::canonical_hash(self).expect("config serialises")
    }

    fn dgp(&self) -> Result<SyntheticDgp> {
        let mut dgp = SyntheticDgp::preset(&self.preset)?;
        if let Some(s) = self.confounding {
            dgp = dgp.with_confounding(s);
        }
        Ok(dgp)
    }
}

/// Shared per-experiment state.
pub struct Setting {
    pub dgp: SyntheticDgp,
    pub arm: i64,
    pub grid: Grid,
    pub region: EvaluationRegion,
    pub cond: ConditionalLaw,
    pub geometry: Arc<dyn ScoreField>,
    pub diffusion: ForwardDiffusionSpec,
    pub pca: PcaProxyConfig,
    pub c: f64,
    pub exponent: f64,
}

impl Setting {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dgp = cfg.dgp()?;
        let seed = SeedPolicy::new(cfg.seed);
        let pilot_n = cfg.n.iter().copied().max().unwrap_or(2000).max(2000);
        let pilot = dgp.generate(pilot_n, &seed.child("region"))?;
        let mut region = EvaluationRegion::bounding_box(
            &project(&dgp, &pilot),
            dgp.eval_dim(),
            cfg.margin,
            cfg.grid_points_per_axis,
        )?;
        if let Some(p) = &dgp.projection {
            region = region.with_projection(p.clone())?;
        }
        let grid = make_grid(&region)?;
        let widest = (0..grid.dim).map(|j| grid.cell_width(j)).fold(0.0, f64::max);
        let n_min = cfg.n.first().copied().unwrap_or(1000) as f64;
        let c = cfg
            .bandwidth
            .c
            .unwrap_or(cfg.bandwidth.cells * widest * n_min.powf(-cfg.bandwidth.exponent));
        let geometry: Arc<dyn ScoreField> = Arc::new(MixtureScore::new(dgp.eval_counterfactual_law(cfg.arm)?, cfg.diffusion)?);
        Ok(Self {
            cond: dgp.eval_conditional(cfg.arm)?,
            arm: cfg.arm,
            dgp,
            grid,
            region,
            geometry,
            diffusion: cfg.diffusion,
            pca: cfg.pca,
            c,
            exponent: cfg.bandwidth.exponent,
        })
    }

    pub fn bandwidth(&self, n: usize) -> f64 {
        self.c * (n as f64).powf(self.exponent)
    }

    /// Kernel of the requested family; the PCA proxy learns its geometry from the
    /// arm outcomes in `outcomes`.
    pub fn kernel(&self, choice: KernelChoice, h: f64, batch: Option<(&ObservationBatch, &[f64])>) -> Result<Box<dyn SmoothingKernel>> {
        let d = self.grid.dim;
        Ok(match choice {
            KernelChoice::Iso => Box::new(IsoKernel::new(d, h)?),
            KernelChoice::Transported => Box::new(TransportedKernel::new(self.diffusion, self.geometry.clone(), h)?),
            KernelChoice::Pca => {
                let (batch, outcomes) = batch.ok_or_else(|| Error::config("kernel", "pca kernel needs arm outcomes"))?;
                let pts: Vec<f64> = batch
                    .arm_indices(self.arm)
                    .iter()
                    .flat_map(|&i| outcomes[i * d..(i + 1) * d].iter().copied())
                    .collect();
                if pts.is_empty() {
                    return Err(Error::EmptyArm(self.arm));
                }
                Box::new(PcaProxyKernel::new(pts, d, h, &self.pca)?)
            }
        })
    }
}

/// Outcomes in evaluation coordinates.
pub fn project(dgp: &SyntheticDgp, batch: &ObservationBatch) -> Vec<f64> {
    match &dgp.projection {
        None => batch.y.clone(),
        Some(p) => (0..batch.n)
            .flat_map(|i| {
                let y = batch.y_row(i);
                p.iter().map(move |row| row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect(),
    }
}

/// One estimator applied to one replication.
#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub error: f64,
    pub covered: Option<bool>,
    pub band: Option<BandResult>,
}

/// Everything one replication needs, built once and shared by the estimators.
pub struct Replication<'a> {
    pub setting: &'a Setting,
    pub batch: ObservationBatch,
    pub outcomes: Vec<f64>,
    pub h: f64,
    pub seed: SeedPolicy,
    plan: crate::domain::CrossFitPlan,
}

impl<'a> Replication<'a> {
    pub fn new(setting: &'a Setting, n: usize, folds: usize, seed: SeedPolicy) -> Result<Self> {
        let batch = setting.dgp.generate(n, &seed)?;
        let outcomes = project(&setting.dgp, &batch);
        let plan = make_crossfit_plan(n, folds, &seed)?;
        Ok(Self {
            h: setting.bandwidth(n),
            setting,
            batch,
            outcomes,
            seed,
            plan,
        })
    }

    pub fn grid_kernel(&self, choice: KernelChoice, with_grad: bool) -> Result<GridKernel> {
        let k = self.setting.kernel(choice, self.h, Some((&self.batch, &self.outcomes)))?;
        GridKernel::build(k.as_ref(), &self.setting.grid, with_grad)
    }

    pub fn true_propensity(&self) -> Vec<f64> {
        (0..self.batch.n)
            .map(|i| self.setting.dgp.propensity(self.setting.arm, self.batch.x_row(i)))
            .collect()
    }

    /// Nuisance view for `gk` from the requested source.
    pub fn nuisance(&self, source: NuisanceSource, gk: &GridKernel, clip: f64, ridge: Option<f64>, with_grad: bool) -> Result<Box<dyn NuisanceView>> {
        let arm = self.setting.arm;
        Ok(match source {
            NuisanceSource::Oracle => {
                let oracle = KernelOracle::build(gk, &self.setting.cond)?;
                Box::new(OracleNuisance::new(&self.batch, arm, self.true_propensity(), Arc::new(oracle))?)
            }
            NuisanceSource::Crossfit => {
                let prop = fit_propensity(&self.batch, arm, &self.plan, clip)?;
                let ridge = ridge.map_or(RegressionRidge::Default, RegressionRidge::Fixed);
                Box::new(fit_localized_regressions(&self.batch, &self.outcomes, arm, &self.plan, prop, gk, ridge, with_grad)?)
            }
        })
    }

    pub fn target(&self, gk: &GridKernel) -> Result<PopulationTarget> {
        PopulationTarget::from_law(gk, &self.setting.cond)
    }

    pub fn test_fields(&self) -> Vec<TestField> {
        default_test_class(self.setting.grid.dim, 4, &SeedPolicy::new(0))
    }

    pub fn run(&self, spec: &EstimatorSpec, cfg: &ExperimentConfig) -> Result<ReplicationOutcome> {
        let s = self.setting;
        let gk = self.grid_kernel(spec.kernel, spec.needs_grad())?;
        let target = self.target(&gk)?;
        let band_seed = self.seed.child("band");
        let dens_outcome = |est: GridEstimate| -> Result<ReplicationOutcome> {
            let error = matched_ise(&est, &target, &s.grid)?;
            if cfg.bands && est.influence.is_some() {
                let band = density_band(&est, cfg.alpha, cfg.multipliers, &band_seed)?;
                Ok(ReplicationOutcome {
                    error,
                    covered: Some(band.covers(&target.density)?),
                    band: Some(band),
                })
            } else {
                Ok(ReplicationOutcome { error, covered: None, band: None })
            }
        };
        let opts = EstimateOptions { keep_influence: cfg.bands };
        match spec.kind {
            EstimatorKind::Dis => {
                let nuis = self.nuisance(cfg.nuisance, &gk, cfg.clip, cfg.ridge, false)?;
                dens_outcome(dis_estimate(&self.batch, &self.outcomes, s.arm, nuis.as_ref(), &gk, opts)?)
            }
            EstimatorKind::Plugin => {
                let est = plugin_estimate(&self.batch, &self.outcomes, s.arm, None, &gk, PluginMode::IpwFree, opts)?;
                dens_outcome(est)
            }
            EstimatorKind::PluginIpw => {
                let pi = match cfg.nuisance {
                    NuisanceSource::Oracle => self.true_propensity(),
                    NuisanceSource::Crossfit => fit_propensity(&self.batch, s.arm, &self.plan, cfg.clip)?.predictions,
                };
                let est = plugin_estimate(&self.batch, &self.outcomes, s.arm, Some(&pi), &gk, PluginMode::Ipw, opts)?;
                dens_outcome(est)
            }
            EstimatorKind::Dss => {
                let nuis = self.nuisance(cfg.nuisance, &gk, cfg.clip, cfg.ridge, true)?;
                let est = dss_estimate(&self.batch, &self.outcomes, s.arm, nuis.as_ref(), &gk, DssFloor::RelativeToPeak)?;
                let mask = s.grid.interior_mask(cfg.interior);
                Ok(ReplicationOutcome {
                    error: score_mse(&est.score, &target, &mask)?,
                    covered: None,
                    band: None,
                })
            }
            EstimatorKind::Stein | EstimatorKind::TreatedOnlyStein => {
                let fields = self.test_fields();
                let est: Vec<SteinEstimate> = if spec.kind == EstimatorKind::Stein {
                    let nuis = self.nuisance(cfg.nuisance, &gk, cfg.clip, cfg.ridge, true)?;
                    stein_estimate(&self.batch, &self.outcomes, s.arm, nuis.as_ref(), &gk, &s.grid, &fields)?
                } else {
                    treated_only_stein(&self.batch, &self.outcomes, s.arm, &gk, &s.grid, &fields)?
                };
                let truth = target.stein(&s.grid, &fields)?;
                let error = est.iter().zip(&truth).map(|(e, t)| (e.value - t).powi(2)).sum::<f64>() / fields.len() as f64;
                if cfg.bands {
                    let band = stein_band(&est, cfg.alpha, cfg.multipliers, &band_seed)?;
                    Ok(ReplicationOutcome {
                        error,
                        covered: Some(band.covers(&truth)?),
                        band: Some(band),
                    })
                } else {
                    Ok(ReplicationOutcome { error, covered: None, band: None })
                }
            }
        }
    }
}

/// Per-estimator, per-`n` aggregate.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub estimator: String,
    pub n: usize,
    pub h: f64,
    pub replications: usize,
    pub failed: usize,
    pub error_mean: f64,
    pub error_se: f64,
    /// Band coverage rate when bands were requested.
    pub coverage: Option<f64>,
    #[serde(skip)]
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub c: f64,
    pub points: Vec<CurvePoint>,
    pub curves: BTreeMap<String, RateCurve>,
    /// First replication's band at the largest `n`, per estimator.
    pub bands: Vec<(String, usize, BandResult)>,
    pub peakiness: Vec<(String, PeakinessReport)>,
    pub drift: Option<DriftTable>,
    pub region: EvaluationRegion,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let setting = Setting::new(cfg)?;
    let specs: Vec<EstimatorSpec> = cfg.estimators.iter().map(|e| EstimatorSpec::parse(e)).collect::<Result<_>>()?;
    let root = SeedPolicy::new(cfg.seed);
    let mut points = Vec::new();
    let mut bands = Vec::new();
    for (ni, &n) in cfg.n.iter().enumerate() {
        let per_rep: Vec<Vec<Option<ReplicationOutcome>>> = par::map_indexed(cfg.replications, |r| {
            let seed = root.child(&format!("rep:{n}:{r}"));
            let rep = match Replication::new(&setting, n, cfg.folds, seed) {
                Ok(rep) => rep,
                Err(e) => {
                    log::warn!("n={n} replication {r}: {e}");
                    return vec![None; specs.len()];
                }
            };
            specs
                .iter()
                .map(|spec| match rep.run(spec, cfg) {
                    Ok(o) => Some(o),
                    Err(e) => {
                        log::warn!("n={n} replication {r} {}: {e}", spec.name);
                        None
                    }
                })
                .collect()
        });
        for (si, spec) in specs.iter().enumerate() {
            let outs: Vec<&ReplicationOutcome> = per_rep.iter().filter_map(|r| r[si].as_ref()).collect();
            let errors: Vec<f64> = outs.iter().map(|o| o.error).collect();
            let cov: Vec<bool> = outs.iter().filter_map(|o| o.covered).collect();
            points.push(CurvePoint {
                estimator: spec.name.clone(),
                n,
                h: setting.bandwidth(n),
                replications: errors.len(),
                failed: cfg.replications - errors.len(),
                error_mean: crate::stats::mean(&errors),
                error_se: crate::stats::std_error(&errors),
                coverage: (!cov.is_empty()).then(|| cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64),
                errors,
            });
            if ni + 1 == cfg.n.len() {
                if let Some(b) = per_rep.first().and_then(|r| r[si].as_ref()).and_then(|o| o.band.clone()) {
                    bands.push((spec.name.clone(), n, b));
                }
            }
        }
    }
    let mut curves = BTreeMap::new();
    if cfg.n.len() >= 3 {
        for spec in &specs {
            let pts: Vec<&CurvePoint> = points.iter().filter(|p| p.estimator == spec.name).collect();
            if pts.iter().all(|p| p.replications > 0) {
                let errs: Vec<Vec<f64>> = pts.iter().map(|p| p.errors.clone()).collect();
                match rate_from_replications(&cfg.n, &errs) {
                    Ok(c) => {
                        curves.insert(spec.name.clone(), c);
                    }
                    Err(e) => log::warn!("{}: no rate fit ({e})", spec.name),
                }
            }
        }
    }
    let peakiness = match &cfg.peakiness {
        Some(p) => run_peakiness(&setting, p, &root)?,
        None => Vec::new(),
    };
    let drift = match &cfg.drift {
        Some(d) => Some(run_drift(&setting, d, &root)?),
        None => None,
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        c: setting.c,
        points,
        curves,
        bands,
        peakiness,
        drift,
        region: setting.region.clone(),
    })
}

fn run_peakiness(setting: &Setting, cfg: &PeakinessConfig, root: &SeedPolicy) -> Result<Vec<(String, PeakinessReport)>> {
    let law = setting.dgp.eval_counterfactual_law(setting.arm)?;
    let samples = law.sample(cfg.samples, &mut root.stream("peakiness"))?;
    // the PCA proxy learns its geometry from a pilot arm sample
    let pilot = setting.dgp.generate(cfg.samples.max(2000), &root.child("peakiness-pilot"))?;
    let pilot_y = project(&setting.dgp, &pilot);
    cfg.kernels
        .iter()
        .map(|name| {
            let choice = parse_kernel(name)?;
            let fam = |h: f64| setting.kernel(choice, h, Some((&pilot, &pilot_y)));
            Ok((name.clone(), peakiness(&fam, &cfg.h, &samples, &setting.grid, cfg.include_score)?))
        })
        .collect()
}

fn run_drift(setting: &Setting, cfg: &DriftConfig, root: &SeedPolicy) -> Result<DriftTable> {
    let law = setting.dgp.eval_counterfactual_law(setting.arm)?;
    let samples = law.sample(cfg.samples, &mut root.stream("drift"))?;
    let d = setting.grid.dim;
    let (lo, hi) = (&setting.region.lower, &setting.region.upper);
    let inner = EvaluationRegion::new(
        (0..d).map(|j| lo[j] + 0.25 * (hi[j] - lo[j])).collect(),
        (0..d).map(|j| lo[j] + 0.75 * (hi[j] - lo[j])).collect(),
        cfg.probes_per_axis.max(2),
    )?;
    let probes = make_grid(&inner)?.points;
    let mode = cfg.mode.clone().unwrap_or_else(|| PerturbationMode::noise_scaled_tilt(d));
    let fam = |h: f64, eps: f64| -> Result<Box<dyn SmoothingKernel>> {
        let score = perturb_score(setting.geometry.clone(), eps, mode.clone(), setting.diffusion)?;
        Ok(Box::new(TransportedKernel::new(setting.diffusion, Arc::new(score), h)?))
    };
    drift_diagnostic(&fam, &samples, &probes, &cfg.h, &cfg.eps)
}

impl ExperimentResult {
    pub fn manifest(&self, outputs: &[String]) -> serde_json::Value {
        let slopes: BTreeMap<&str, serde_json::Value> = self
            .curves
            .iter()
            .map(|(k, c)| (k.as_str(), serde_json::json!({"slope": c.slope, "slope_se": c.slope_se})))
            .collect();
        let failures: BTreeMap<String, usize> = {
            let mut m = BTreeMap::new();
            for p in &self.points {
                *m.entry(p.estimator.clone()).or_insert(0) += p.failed;
            }
            m
        };
        let coverage: Vec<serde_json::Value> = self
            .points
            .iter()
            .filter_map(|p| p.coverage.map(|c| serde_json::json!({"estimator": p.estimator, "n": p.n, "coverage": c})))
            .collect();
        serde_json::json!({
            "name": self.config.name,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "config_hash": self.config.hash(),
            "config": self.config,
            "bandwidth_c": self.c,
            "region": {"lower": self.region.lower, "upper": self.region.upper},
            "slopes": slopes,
            "failures": failures,
            "coverage": coverage,
            "peakiness_slopes": self.peakiness.iter().map(|(k, r)| (k.clone(), r.slope)).collect::<BTreeMap<_, _>>(),
            "drift_exponents": self.drift.as_ref().map(|d| serde_json::json!({"h": d.h_exponent, "eps": d.eps_exponent})),
            "outputs": outputs,
        })
    }

    /// CSV with header `estimator,n,h,replications,failed,error_mean,error_se,slope,slope_se,coverage`.
    pub fn write_curves<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "estimator",
            "n",
            "h",
            "replications",
            "failed",
            "error_mean",
            "error_se",
            "slope",
            "slope_se",
            "coverage",
        ])
        .map_err(csv_err)?;
        for p in &self.points {
            let c = self.curves.get(&p.estimator);
            wr.write_record([
                p.estimator.clone(),
                p.n.to_string(),
                fmt_f64(p.h),
                p.replications.to_string(),
                p.failed.to_string(),
                fmt_f64(p.error_mean),
                fmt_f64(p.error_se),
                c.map(|c| fmt_f64(c.slope)).unwrap_or_default(),
                c.map(|c| fmt_f64(c.slope_se)).unwrap_or_default(),
                p.coverage.map(fmt_f64).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn curves_svg(&self) -> String {
        let mut names: Vec<&str> = self.points.iter().map(|p| p.estimator.as_str()).collect();
        names.dedup();
        let series: Vec<Series> = names
            .iter()
            .map(|name| {
                let pts: Vec<&CurvePoint> = self.points.iter().filter(|p| p.estimator == *name).collect();
                Series {
                    label: name.to_string(),
                    x: pts.iter().map(|p| p.n as f64).collect(),
                    y: pts.iter().map(|p| p.error_mean).collect(),
                    fit: self.curves.get(*name).map(|c| (c.slope, c.intercept)),
                }
            })
            .collect();
        loglog_svg(&format!("{}: error against n", self.config.name), "n", "error", &series)
    }

    /// CSV with header `kernel,h,H,Hs,d_eff`, one block per kernel family.
    pub fn write_peakiness<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["kernel", "h", "H", "Hs", "d_eff"]).map_err(csv_err)?;
        for (name, r) in &self.peakiness {
            for i in 0..r.h.len() {
                wr.write_record([
                    name.clone(),
                    fmt_f64(r.h[i]),
                    fmt_f64(r.peakiness[i]),
                    r.score_peakiness.as_ref().map(|v| fmt_f64(v[i])).unwrap_or_default(),
                    fmt_f64(r.d_eff[i]),
                ])
                .map_err(csv_err)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes the bundle into `dir` and returns the file names written.
    pub fn write_bundle(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut outputs = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            fs::write(dir.join(name), bytes)?;
            outputs.push(name.to_string());
            Ok(())
        };
        let mut buf = Vec::new();
        self.write_curves(&mut buf)?;
        put("curves.csv", buf)?;
        put("curves.svg", self.curves_svg().into_bytes())?;

        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(["estimator", "n", "point_id", "center", "sigma", "radius", "lower", "upper"])
            .map_err(csv_err)?;
        for (name, n, b) in &self.bands {
            for p in 0..b.center.len() {
                wr.write_record([
                    name.clone(),
                    n.to_string(),
                    b.index[p].clone(),
                    fmt_f64(b.center[p]),
                    fmt_f64(b.sigma[p]),
                    fmt_f64(b.radius[p]),
                    fmt_f64(b.center[p] - b.radius[p]),
                    fmt_f64(b.center[p] + b.radius[p]),
                ])
                .map_err(csv_err)?;
            }
        }
        put("bands.csv", wr.into_inner().map_err(|e| Error::Data(e.to_string()))?)?;

        let mut buf = Vec::new();
        self.write_peakiness(&mut buf)?;
        put("peakiness.csv", buf)?;
        for (name, r) in &self.peakiness {
            put(&format!("peakiness-{name}.svg"), r.to_svg().into_bytes())?;
        }

        let mut buf = Vec::new();
        match &self.drift {
            Some(d) => {
                d.write_csv(&mut buf)?;
                put("drift.csv", buf)?;
                put("drift.svg", d.to_svg().into_bytes())?;
            }
            None => {
                DriftTable {
                    rows: Vec::new(),
                    h_slopes: Vec::new(),
                    eps_slopes: Vec::new(),
                    h_exponent: None,
                    eps_exponent: None,
                }
                .write_csv(&mut buf)?;
                put("drift.csv", buf)?;
            }
        }
        outputs.push("manifest.json".into());
        let manifest = self.manifest(&outputs);
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"preset": "gauss2d", "estimators": ["dis:iso"], "n": [300], "replications": 1,
                "grid_points_per_axis": 8, "seed": 3}"#,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_config_gives_one_point() {
        let r = run_experiment(&tiny()).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!(r.points[0].replications, 1);
        assert!(r.curves.is_empty());
    }

    #[test]
    fn config_errors_name_the_key() {
        let e = ExperimentConfig::from_json(r#"{"preset": "gauss2d", "estimators": ["dis:iso"], "n": [300], "bogus": 1}"#)
            .unwrap_err();
        assert!(e.is_config() && e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"preset": "gauss2d", "estimators": ["dis:foo"], "n": [300]}"#).unwrap_err();
        assert!(e.to_string().contains("estimators"));
        let e = ExperimentConfig::from_json(r#"{"preset": "gauss2d", "estimators": ["dis:iso"], "n": [300, 200]}"#).unwrap_err();
        assert!(e.to_string().contains("`n`") || e.to_string().contains("n:"), "{e}");
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = tiny();
        let r = run_experiment(&cfg).unwrap();
        let m = r.manifest(&[]);
        let back = ExperimentConfig::from_value(m).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
