//! Config documents, `--set` overrides and run manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use geodis::diffusion::ForwardDiffusionSpec;
use geodis::domain::{canonical_hash, content_hash};
use geodis::kernel::PcaProxyConfig;
use geodis::score::PerturbationMode;
use geodis::synthlab::experiment::{DriftConfig, ExperimentConfig, NuisanceSource, PeakinessConfig};

/// Configuration problem reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}: {}", self.key, self.msg)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(key: impl Into<String>, msg: impl Into<String>) -> anyhow::Error {
    ConfigError {
        key: key.into(),
        msg: msg.into(),
    }
    .into()
}

/// Reads a config document (or a manifest that embeds one under `config`).
pub fn read_document(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| config_error("config", format!("{}: {e}", path.display())))?;
    Ok(match v {
        Value::Object(ref m) if m.contains_key("config") && m.contains_key("config_hash") => m["config"].clone(),
        Value::Object(_) => v,
        _ => return Err(config_error("config", "top level must be a JSON object")),
    })
}

/// Applies `key=value` overrides; dotted keys address nested objects and values
/// parse as JSON with a fallback to plain strings.
pub fn apply_overrides(doc: &mut Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| config_error(s.clone(), "override must look like key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut *doc;
        for (i, part) in parts.iter().enumerate() {
            let Value::Object(map) = cur else {
                return Err(config_error(parts[..i].join("."), "is not an object"));
            };
            if i + 1 == parts.len() {
                map.insert(part.to_string(), value.clone());
                break;
            }
            cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
    }
    Ok(())
}

/// Deserialises with unknown keys rejected; errors name the offending key.
pub fn parse<T: DeserializeOwned>(doc: Value) -> Result<T> {
    serde_json::from_value(doc).map_err(|e| config_error(key_of(&e.to_string()), e.to_string()))
}

fn key_of(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

/// Settings shared by `fit-dis`, `fit-dss`, `stein` and `band`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "d_kernel")]
    pub kernel: String,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "d_cells")]
    pub cells: f64,
    #[serde(default = "d_arm")]
    pub arm: i64,
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default)]
    pub ridge: Option<f64>,
    #[serde(default)]
    pub nuisance: NuisanceSource,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub confounding: Option<f64>,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub region: Option<RegionConfig>,
    #[serde(default = "d_gpa")]
    pub grid_points_per_axis: usize,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default)]
    pub projection: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub pca: PcaProxyConfig,
    #[serde(default)]
    pub diffusion: ForwardDiffusionSpec,
    #[serde(default)]
    pub floor: Option<f64>,
    #[serde(default = "d_extra")]
    pub extra_fields: usize,
    #[serde(default)]
    pub target: BandTarget,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_multipliers")]
    pub multipliers: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Geometry {
    /// Gaussian fitted to the arm outcomes.
    #[default]
    Fit,
    /// Counterfactual law of `preset`.
    Preset,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum BandTarget {
    #[default]
    Density,
    Stein,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

fn d_kernel() -> String {
    "iso".into()
}
fn d_cells() -> f64 {
    3.0
}
fn d_arm() -> i64 {
    1
}
fn d_folds() -> usize {
    5
}
fn d_clip() -> f64 {
    0.05
}
fn d_gpa() -> usize {
    30
}
fn d_margin() -> f64 {
    0.1
}
fn d_extra() -> usize {
    4
}
fn d_alpha() -> f64 {
    0.05
}
fn d_multipliers() -> usize {
    geodis::inference::DEFAULT_MULTIPLIERS
}
fn d_preset() -> String {
    "gauss2d".into()
}
fn d_samples() -> usize {
    400
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakinessCommand {
    #[serde(default = "d_preset")]
    pub preset: String,
    #[serde(default)]
    pub confounding: Option<f64>,
    #[serde(default = "d_arm")]
    pub arm: i64,
    #[serde(default = "d_gpa")]
    pub grid_points_per_axis: usize,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default)]
    pub pca: PcaProxyConfig,
    #[serde(default)]
    pub diffusion: ForwardDiffusionSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_peak_h")]
    pub h: Vec<f64>,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_peak_kernels")]
    pub kernels: Vec<String>,
    #[serde(default)]
    pub include_score: bool,
}

fn d_peak_h() -> Vec<f64> {
    vec![0.1, 0.14, 0.2, 0.28, 0.4]
}
fn d_peak_kernels() -> Vec<String> {
    vec!["iso".into(), "pca".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftCommand {
    #[serde(default = "d_preset")]
    pub preset: String,
    #[serde(default)]
    pub confounding: Option<f64>,
    #[serde(default = "d_arm")]
    pub arm: i64,
    #[serde(default = "d_gpa")]
    pub grid_points_per_axis: usize,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default)]
    pub pca: PcaProxyConfig,
    #[serde(default)]
    pub diffusion: ForwardDiffusionSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_drift_h")]
    pub h: Vec<f64>,
    #[serde(default = "d_drift_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "d_drift_samples")]
    pub samples: usize,
    #[serde(default = "d_probes")]
    pub probes_per_axis: usize,
    #[serde(default)]
    pub mode: Option<PerturbationMode>,
}

fn d_drift_h() -> Vec<f64> {
    vec![0.2, 0.3, 0.45]
}
fn d_drift_eps() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}
fn d_drift_samples() -> usize {
    5000
}
fn d_probes() -> usize {
    4
}

macro_rules! design_experiment {
    ($c:expr, $name:expr) => {
        ExperimentConfig {
            name: $name.into(),
            preset: $c.preset.clone(),
            confounding: $c.confounding,
            arm: $c.arm,
            estimators: Vec::new(),
            n: Vec::new(),
            replications: 1,
            seed: $c.seed,
            bandwidth: Default::default(),
            grid_points_per_axis: $c.grid_points_per_axis,
            margin: $c.margin,
            folds: 5,
            clip: 0.05,
            nuisance: NuisanceSource::Crossfit,
            ridge: None,
            pca: $c.pca,
            diffusion: $c.diffusion,
            interior: 0.2,
            bands: false,
            alpha: 0.05,
            multipliers: geodis::inference::DEFAULT_MULTIPLIERS,
            peakiness: None,
            drift: None,
        }
    };
}

impl PeakinessCommand {
    pub fn experiment(&self) -> ExperimentConfig {
        let mut e = design_experiment!(self, "peakiness");
        e.peakiness = Some(PeakinessConfig {
            h: self.h.clone(),
            samples: self.samples,
            kernels: self.kernels.clone(),
            include_score: self.include_score,
        });
        e
    }
}

impl DriftCommand {
    pub fn experiment(&self) -> ExperimentConfig {
        let mut e = design_experiment!(self, "drift");
        e.drift = Some(DriftConfig {
            h: self.h.clone(),
            eps: self.eps.clone(),
            samples: self.samples,
            probes_per_axis: self.probes_per_axis,
            mode: self.mode.clone(),
        });
        e
    }
}

/// Run record written next to every output.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub config_hash: String,
    pub config: &'a C,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub summary: Value,
}

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

impl InputRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: content_hash(&bytes),
        })
    }
}

/// `<dir>/<stem>.manifest.json` for a file output.
pub fn manifest_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_manifest<C: Serialize>(
    path: &Path,
    command: &str,
    seed: u64,
    config: &C,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    summary: Value,
) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_hash: canonical_hash(config)?,
        config,
        inputs,
        outputs,
        summary,
    };
    fs::write(path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut v = serde_json::json!({"a": 1, "pca": {"k_nn": 5}});
        apply_overrides(&mut v, &["pca.k_nn=7".into(), "name=run-1".into(), "n=[1,2]".into()]).unwrap();
        assert_eq!(v["pca"]["k_nn"], 7);
        assert_eq!(v["name"], "run-1");
        assert_eq!(v["n"][1], 2);
        assert!(apply_overrides(&mut v, &["a.b=1".into()]).is_err());
        assert!(apply_overrides(&mut v, &["novalue".into()]).is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse::<FitConfig>(serde_json::json!({"kernal": "iso"})).unwrap_err();
        let c = e.downcast_ref::<ConfigError>().unwrap();
        assert_eq!(c.key, "kernal");
    }
}
