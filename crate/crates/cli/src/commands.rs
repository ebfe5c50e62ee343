//! Subcommand bodies. Each returns after writing its outputs and manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use geodis::domain::{make_crossfit_plan, make_grid, EvaluationRegion, Grid, ObservationBatch};
use geodis::estimators::{
    default_test_class, dis_estimate, dss_estimate, stein_estimate, write_stein_csv, DssFloor, EstimateOptions,
};
use geodis::inference::{density_band, stein_band};
use geodis::kernel::{GridKernel, IsoKernel, PcaProxyKernel, SmoothingKernel, TransportedKernel};
use geodis::nuisance::{fit_localized_regressions, fit_propensity, NuisanceView, OracleNuisance, RegressionRidge};
use geodis::rng::SeedPolicy;
use geodis::score::{fit_pca_proxy_points, MixtureScore, Ridge, ScoreField};
use geodis::synthlab::experiment::{run_experiment, ExperimentConfig, ExperimentResult, NuisanceSource};
use geodis::synthlab::{KernelOracle, SyntheticDgp};

use crate::config::{
    config_error, manifest_path, write_manifest, BandTarget, DriftCommand, FitConfig, Geometry, InputRecord,
    PeakinessCommand,
};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot write {}", path.display()))?,
    ))
}

fn name_of(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn simulate(preset: &str, n: usize, seed: u64, confounding: Option<f64>, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(config_error("n", "must be positive"));
    }
    let mut dgp = SyntheticDgp::preset(preset)?;
    if let Some(s) = confounding {
        dgp = dgp.with_confounding(s);
    }
    let batch = dgp.generate(n, &SeedPolicy::new(seed))?;
    batch.write_csv(create(out)?)?;
    let config = json!({"preset": preset, "n": n, "seed": seed, "confounding": confounding});
    write_manifest(
        &manifest_path(out),
        "simulate",
        seed,
        &config,
        Vec::new(),
        vec![name_of(out)],
        json!({"rows": batch.n, "covariates": batch.k, "outcome_dim": batch.d}),
    )
}

/// Data, grid and bandwidth for the single-sample commands.
struct Fit {
    cfg: FitConfig,
    batch: ObservationBatch,
    outcomes: Vec<f64>,
    grid: Grid,
    h: f64,
    seed: SeedPolicy,
    dgp: Option<SyntheticDgp>,
}

impl Fit {
    fn load(cfg: FitConfig, data: &Path) -> Result<Self> {
        let file = File::open(data).with_context(|| format!("reading {}", data.display()))?;
        let batch = ObservationBatch::read_csv(file)?;
        let dgp = match &cfg.preset {
            Some(p) => {
                let mut d = SyntheticDgp::preset(p)?;
                if let Some(s) = cfg.confounding {
                    d = d.with_confounding(s);
                }
                Some(d)
            }
            None => None,
        };
        let mut region = match &cfg.region {
            Some(r) => EvaluationRegion::new(r.lower.clone(), r.upper.clone(), cfg.grid_points_per_axis)?,
            None => {
                let dim = cfg.projection.as_ref().map_or(batch.d, Vec::len);
                let probe = match &cfg.projection {
                    Some(p) => EvaluationRegion::new(vec![0.0; dim], vec![1.0; dim], 2)?.with_projection(p.clone())?,
                    None => EvaluationRegion::new(vec![0.0; dim], vec![1.0; dim], 2)?,
                };
                EvaluationRegion::bounding_box(&probe.project_outcomes(&batch)?, dim, cfg.margin, cfg.grid_points_per_axis)?
            }
        };
        if let Some(p) = &cfg.projection {
            region = region.with_projection(p.clone())?;
        }
        let outcomes = region.project_outcomes(&batch)?;
        let grid = make_grid(&region)?;
        let h = match cfg.h {
            Some(h) if h > 0.0 => h,
            Some(_) => return Err(config_error("h", "must be positive")),
            None => {
                let h = cfg.cells * (0..grid.dim).map(|j| grid.cell_width(j)).fold(0.0, f64::max);
                // the diffusion time h^power must stay below 1
                if cfg.kernel == "transported" { h.min(0.95) } else { h }
            }
        };
        if cfg.folds < 2 {
            return Err(config_error("folds", "need at least 2 folds"));
        }
        Ok(Self {
            seed: SeedPolicy::new(cfg.seed),
            cfg,
            batch,
            outcomes,
            grid,
            h,
            dgp,
        })
    }

    fn arm_points(&self) -> Vec<f64> {
        let d = self.grid.dim;
        self.batch
            .arm_indices(self.cfg.arm)
            .iter()
            .flat_map(|&i| self.outcomes[i * d..(i + 1) * d].iter().copied())
            .collect()
    }

    fn kernel(&self) -> Result<Box<dyn SmoothingKernel>> {
        let d = self.grid.dim;
        Ok(match self.cfg.kernel.as_str() {
            "iso" => Box::new(IsoKernel::new(d, self.h)?),
            "pca" => Box::new(PcaProxyKernel::new(self.arm_points(), d, self.h, &self.cfg.pca)?),
            "transported" => {
                let score: Arc<dyn ScoreField> = match self.cfg.geometry {
                    Geometry::Preset => {
                        let dgp = self.dgp.as_ref().ok_or_else(|| config_error("preset", "geometry `preset` needs a preset"))?;
                        Arc::new(MixtureScore::new(dgp.eval_counterfactual_law(self.cfg.arm)?, self.cfg.diffusion)?)
                    }
                    Geometry::Fit => {
                        let pts = self.arm_points();
                        let m = pts.len() / d;
                        if m < 2 {
                            return Err(geodis::error::Error::EmptyArm(self.cfg.arm).into());
                        }
                        let mean: Vec<f64> = (0..d).map(|j| pts.iter().skip(j).step_by(d).sum::<f64>() / m as f64).collect();
                        let proxy = fit_pca_proxy_points(&pts, &mean, m, Ridge::Auto)?;
                        Arc::new(MixtureScore::from_proxy(mean, proxy.covariance, self.cfg.diffusion)?)
                    }
                };
                Box::new(TransportedKernel::new(self.cfg.diffusion, score, self.h)?)
            }
            other => return Err(config_error("kernel", format!("unknown kernel `{other}` (iso, pca, transported)"))),
        })
    }

    fn grid_kernel(&self, with_grad: bool) -> Result<GridKernel> {
        Ok(GridKernel::build(self.kernel()?.as_ref(), &self.grid, with_grad)?)
    }

    fn nuisance(&self, gk: &GridKernel, with_grad: bool) -> Result<Box<dyn NuisanceView>> {
        let arm = self.cfg.arm;
        Ok(match self.cfg.nuisance {
            NuisanceSource::Crossfit => {
                let plan = make_crossfit_plan(self.batch.n, self.cfg.folds, &self.seed)?;
                let prop = fit_propensity(&self.batch, arm, &plan, self.cfg.clip)?;
                let ridge = self.cfg.ridge.map_or(RegressionRidge::Default, RegressionRidge::Fixed);
                Box::new(fit_localized_regressions(&self.batch, &self.outcomes, arm, &plan, prop, gk, ridge, with_grad)?)
            }
            NuisanceSource::Oracle => {
                let dgp = self.dgp.as_ref().ok_or_else(|| config_error("nuisance", "oracle nuisances need `preset`"))?;
                let pi = (0..self.batch.n).map(|i| dgp.propensity(arm, self.batch.x_row(i))).collect();
                let oracle = KernelOracle::build(gk, &dgp.eval_conditional(arm)?)?;
                Box::new(OracleNuisance::new(&self.batch, arm, pi, Arc::new(oracle))?)
            }
        })
    }

    fn summary(&self) -> Value {
        json!({"n": self.batch.n, "h": self.h, "grid_points": self.grid.len(), "grid_fingerprint": self.grid.fingerprint()})
    }

    fn finish(&self, command: &str, data: &Path, out: &Path, mut summary: Value, extra: &[PathBuf]) -> Result<()> {
        if let (Value::Object(m), Value::Object(base)) = (&mut summary, self.summary()) {
            m.extend(base);
        }
        let mut outputs = vec![name_of(out)];
        outputs.extend(extra.iter().map(|p| name_of(p)));
        write_manifest(
            &manifest_path(out),
            command,
            self.cfg.seed,
            &self.cfg,
            vec![InputRecord::of(data)?],
            outputs,
            summary,
        )
    }
}

pub fn fit_dis(cfg: FitConfig, data: &Path, out: &Path) -> Result<()> {
    let fit = Fit::load(cfg, data)?;
    let gk = fit.grid_kernel(false)?;
    let nuis = fit.nuisance(&gk, false)?;
    let est = dis_estimate(&fit.batch, &fit.outcomes, fit.cfg.arm, nuis.as_ref(), &gk, EstimateOptions::default())?;
    est.write_csv(&fit.grid, create(out)?)?;
    fit.finish("fit-dis", data, out, json!({"diagnostics": est.diagnostics}), &[])
}

pub fn fit_dss(cfg: FitConfig, data: &Path, out: &Path) -> Result<()> {
    let fit = Fit::load(cfg, data)?;
    let gk = fit.grid_kernel(true)?;
    let nuis = fit.nuisance(&gk, true)?;
    let floor = fit.cfg.floor.map_or(DssFloor::RelativeToPeak, DssFloor::Fixed);
    let est = dss_estimate(&fit.batch, &fit.outcomes, fit.cfg.arm, nuis.as_ref(), &gk, floor)?;
    est.score.write_csv(&fit.grid, create(out)?)?;
    fit.finish(
        "fit-dss",
        data,
        out,
        json!({"floor": est.floor, "diagnostics": est.score.diagnostics}),
        &[],
    )
}

pub fn stein(cfg: FitConfig, data: &Path, out: &Path) -> Result<()> {
    let fit = Fit::load(cfg, data)?;
    let gk = fit.grid_kernel(true)?;
    let nuis = fit.nuisance(&gk, true)?;
    let fields = default_test_class(fit.grid.dim, fit.cfg.extra_fields, &fit.seed);
    let est = stein_estimate(&fit.batch, &fit.outcomes, fit.cfg.arm, nuis.as_ref(), &gk, &fit.grid, &fields)?;
    write_stein_csv(&est, create(out)?)?;
    fit.finish("stein", data, out, json!({"fields": fields.len()}), &[])
}

pub fn band(cfg: FitConfig, data: &Path, out: &Path) -> Result<()> {
    let fit = Fit::load(cfg, data)?;
    let (alpha, b) = (fit.cfg.alpha, fit.cfg.multipliers);
    let band_seed = fit.seed.child("band");
    let band = match fit.cfg.target {
        BandTarget::Density => {
            let gk = fit.grid_kernel(false)?;
            let nuis = fit.nuisance(&gk, false)?;
            let opts = EstimateOptions { keep_influence: true };
            let est = dis_estimate(&fit.batch, &fit.outcomes, fit.cfg.arm, nuis.as_ref(), &gk, opts)?;
            density_band(&est, alpha, b, &band_seed).map_err(|e| {
                let hint = matches!(e, geodis::error::Error::DegenerateVariance { .. })
                    .then_some("; narrow `region` to where the arm has data");
                anyhow::Error::new(e).context(format!("density band{}", hint.unwrap_or_default()))
            })?
        }
        BandTarget::Stein => {
            let gk = fit.grid_kernel(true)?;
            let nuis = fit.nuisance(&gk, true)?;
            let fields = default_test_class(fit.grid.dim, fit.cfg.extra_fields, &fit.seed);
            let est = stein_estimate(&fit.batch, &fit.outcomes, fit.cfg.arm, nuis.as_ref(), &gk, &fit.grid, &fields)?;
            stein_band(&est, alpha, b, &band_seed)?
        }
    };
    band.write_csv(create(out)?)?;
    fit.finish("band", data, out, band.summary_json(), &[])
}

fn svg_sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    out.with_file_name(format!("{stem}{suffix}.svg"))
}

pub fn peakiness(cmd: PeakinessCommand, out: &Path) -> Result<()> {
    let res = run_experiment(&cmd.experiment())?;
    res.write_peakiness(create(out)?)?;
    let mut extra = Vec::new();
    for (name, r) in &res.peakiness {
        let p = svg_sibling(out, &format!("-{name}"));
        fs::write(&p, r.to_svg())?;
        extra.push(p);
    }
    let summary = json!({"slopes": res.peakiness.iter().map(|(k, r)| (k.clone(), r.slope)).collect::<std::collections::BTreeMap<_, _>>()});
    let mut outputs = vec![name_of(out)];
    outputs.extend(extra.iter().map(|p| name_of(p)));
    write_manifest(&manifest_path(out), "peakiness", cmd.seed, &cmd, Vec::new(), outputs, summary)
}

pub fn drift(cmd: DriftCommand, out: &Path) -> Result<()> {
    let res = run_experiment(&cmd.experiment())?;
    let table = res.drift.as_ref().expect("drift requested");
    table.write_csv(create(out)?)?;
    let svg = svg_sibling(out, "");
    fs::write(&svg, table.to_svg())?;
    let summary = json!({"h_exponent": table.h_exponent, "eps_exponent": table.eps_exponent});
    write_manifest(&manifest_path(out), "drift", cmd.seed, &cmd, Vec::new(), vec![name_of(out), name_of(&svg)], summary)
}

pub fn experiment(cfg: ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    let res = run_experiment(&cfg)?;
    res.write_bundle(out).with_context(|| format!("writing bundle to {}", out.display()))?;
    Ok(res)
}
