use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use geodis::synthlab::experiment::ExperimentConfig;

mod commands;
mod config;

use config::{apply_overrides, parse, read_document, ConfigError};

const FIT_KEYS: &str = "\
Config keys (JSON file via --config, or --set key=value; dotted keys reach nested objects):
  kernel                iso | pca | transported                       [iso]
  h                     bandwidth; absent = cells x widest grid cell
  cells                 grid cells spanned by the default bandwidth   [3]
  arm                   treatment arm label                           [1]
  folds                 cross-fitting folds                           [5]
  clip                  propensity floor                              [0.05]
  ridge                 ridge of the localized regressions            [1e-6 n]
  nuisance              crossfit | oracle (oracle needs preset)       [crossfit]
  preset                gauss2d | mix2d | thin2d | ambient10
  confounding           override of the preset confounding strength
  geometry              fit | preset: transported-kernel geometry     [fit]
  region.lower          region lower corner; absent = bounding box
  region.upper          region upper corner
  grid_points_per_axis  grid resolution                               [30]
  margin                bounding-box margin per side                  [0.1]
  projection            rows of an evaluation projection matrix
  pca.knn_fraction      PCA neighbours as a share of the arm          [0.1]
  pca.k_nn              PCA neighbour count (overrides knn_fraction)
  pca.ridge             \"auto\" or {\"fixed\": value}                  [auto]
  pca.tangent_share     explained variance defining tangents         [0.9]
  pca.normal_var        kernel variance off the tangent space
  diffusion.schedule    {\"kind\":\"constant\",\"beta\":1} or {\"kind\":\"linear\",\"beta0\":..,\"beta1\":..}
  diffusion.time_power  diffusion time = h^time_power                 [2]
  diffusion.steps       RK4 steps of the probability flow             [64]
  floor                 fixed DSS denominator floor (fit-dss)         [1e-4 x peak]
  extra_fields          random Stein test fields beyond the axes     [4]
  target                density | stein (band)                        [density]
  alpha                 band level                                    [0.05]
  multipliers           bootstrap multiplier draws                    [1000]
  seed                  master seed (also --seed)                     [0]";

const EXPERIMENT_KEYS: &str = "\
Config keys (a previous manifest.json is also accepted):
  name                  run name                                      [experiment]
  preset                gauss2d | mix2d | thin2d | ambient10          (required)
  confounding           override of the preset confounding strength
  arm                   treatment arm label                           [1]
  estimators            list of kind:kernel; kind in dis, plugin, plugin-ipw, dss,
                        stein, treated-only-stein; kernel in iso, pca, transported
  n                     strictly increasing sample sizes
  replications          replications per (estimator, n)               [50]
  seed                  master seed (also --seed)                     [0]
  bandwidth.c           h = c n^exponent; absent = cells x widest cell at the smallest n
  bandwidth.exponent    bandwidth exponent                            [-0.2]
  bandwidth.cells       grid cells spanned at the smallest n          [3]
  grid_points_per_axis  grid resolution                               [30]
  margin                bounding-box margin per side                  [0.1]
  folds                 cross-fitting folds                           [5]
  clip                  propensity floor                              [0.05]
  nuisance              crossfit | oracle                             [crossfit]
  ridge                 ridge of the localized regressions            [1e-6 n]
  pca.*, diffusion.*    as in fit-dis
  interior              share trimmed per side when scoring scores    [0.2]
  bands                 compute simultaneous bands and coverage       [false]
  alpha                 band level                                    [0.05]
  multipliers           bootstrap multiplier draws                    [1000]
  peakiness             {h, samples, kernels, include_score} as in the peakiness command
  drift                 {h, eps, samples, probes_per_axis, mode} as in the drift command";

/// Geometry-adaptive counterfactual density and score estimation.
#[derive(Parser, Debug)]
#[command(name = "geodis", version, about, propagate_version = true)]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Master seed, overriding the config `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Observations CSV (`x0..,a,y0..`).
    #[arg(long)]
    data: PathBuf,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV; the manifest goes next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DesignArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV; plots and the manifest go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic sample from a preset design.
    Simulate {
        #[arg(long, default_value = "gauss2d")]
        preset: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        confounding: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step counterfactual density on a grid.
    #[command(after_long_help = FIT_KEYS)]
    FitDis(FitArgs),
    /// One-step counterfactual smoothed score on a grid.
    #[command(after_long_help = FIT_KEYS)]
    FitDss(FitArgs),
    /// Stein functionals over the default test class.
    #[command(after_long_help = FIT_KEYS)]
    Stein(FitArgs),
    /// Simultaneous confidence band for the density or the Stein functionals.
    #[command(after_long_help = FIT_KEYS)]
    Band(FitArgs),
    /// Kernel peakiness and effective dimension across bandwidths.
    #[command(after_long_help = const_format_peak())]
    Peakiness(DesignArgs),
    /// Drift of the transported kernel under score perturbations.
    #[command(after_long_help = const_format_drift())]
    Drift(DesignArgs),
    /// Full replication experiment writing a results bundle.
    #[command(after_long_help = EXPERIMENT_KEYS)]
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

const fn const_format_peak() -> &'static str {
    concat!(
        "Config keys (JSON file via --config, or --set key=value):\n",
        "  preset                gauss2d | mix2d | thin2d | ambient10          [gauss2d]\n",
        "  confounding           override of the preset confounding strength\n",
        "  arm                   treatment arm label                           [1]\n",
        "  grid_points_per_axis  grid resolution                               [30]\n",
        "  margin                bounding-box margin per side                  [0.1]\n",
        "  pca.*                 PCA proxy settings as in fit-dis\n",
        "  diffusion.*           diffusion settings as in fit-dis\n",
        "  seed                  master seed (also --seed)                     [0]\n",
        "  h                     bandwidth list                                [0.1 .. 0.4]\n",
        "  samples               counterfactual draws averaged over            [400]\n",
        "  kernels               list of iso | pca | transported               [iso, pca]\n",
        "  include_score         add the score-peakiness column                [false]"
    )
}

const fn const_format_drift() -> &'static str {
    concat!(
        "Config keys (JSON file via --config, or --set key=value):\n",
        "  preset                gauss2d | mix2d | thin2d | ambient10          [gauss2d]\n",
        "  confounding           override of the preset confounding strength\n",
        "  arm                   treatment arm label                           [1]\n",
        "  grid_points_per_axis  grid resolution                               [30]\n",
        "  margin                bounding-box margin per side                  [0.1]\n",
        "  pca.*                 PCA proxy settings as in fit-dis\n",
        "  diffusion.*           diffusion settings as in fit-dis\n",
        "  seed                  master seed (also --seed)                     [0]\n",
        "  h                     bandwidth list                                [0.2, 0.3, 0.45]\n",
        "  eps                   perturbation sizes                            [0.05, 0.1, 0.2]\n",
        "  samples               draws used to integrate the drift             [5000]\n",
        "  probes_per_axis       probe grid over the central half of the region [4]\n",
        "  mode                  {\"mode\":\"noise-scaled-tilt\",\"direction\":[..],\"floor\":1e-3},\n",
        "                        {\"mode\":\"linear-tilt\",\"direction\":[..]} or {\"mode\":\"rotation\"}"
    )
}

fn load<T: serde::de::DeserializeOwned>(path: Option<&std::path::Path>, cli: &Cli) -> Result<T> {
    let mut doc = read_document(path)?;
    apply_overrides(&mut doc, &cli.sets)?;
    if let Some(seed) = cli.seed {
        apply_overrides(&mut doc, &[format!("seed={seed}")])?;
    }
    parse(doc)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate {
            preset,
            n,
            confounding,
            out,
        } => commands::simulate(preset, *n, cli.seed.unwrap_or(0), *confounding, out),
        Command::FitDis(a) => commands::fit_dis(load(a.config.as_deref(), cli)?, &a.data, &a.out),
        Command::FitDss(a) => commands::fit_dss(load(a.config.as_deref(), cli)?, &a.data, &a.out),
        Command::Stein(a) => commands::stein(load(a.config.as_deref(), cli)?, &a.data, &a.out),
        Command::Band(a) => commands::band(load(a.config.as_deref(), cli)?, &a.data, &a.out),
        Command::Peakiness(a) => commands::peakiness(load(a.config.as_deref(), cli)?, &a.out),
        Command::Drift(a) => commands::drift(load(a.config.as_deref(), cli)?, &a.out),
        Command::Experiment { config, out } => {
            let cfg: ExperimentConfig = load(Some(config), cli)?;
            cfg.validate()?;
            let res = commands::experiment(cfg, out)?;
            for (name, c) in &res.curves {
                println!("{name}: slope {:.3} ± {:.3}", c.slope, c.slope_se);
            }
            Ok(())
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<geodis::error::Error>().is_some_and(|g| g.is_config())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = geodis::par::with_workers(cli.workers, || run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
