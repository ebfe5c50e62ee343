//! Browser demo: kernel heatmaps, peakiness curves and drift curves on the preset
//! designs. The plain functions are native-testable; the `wasm_bindgen` wrappers
//! only convert errors.

use std::sync::Arc;

use serde_json::json;
use wasm_bindgen::prelude::*;

use geodis::domain::{make_grid, EvaluationRegion};
use geodis::error::{Error, Result};
use geodis::kernel::{GridKernel, SmoothingKernel, TransportedKernel};
use geodis::peakiness::peakiness;
use geodis::rng::SeedPolicy;
use geodis::score::{perturb_score, PerturbationMode};
use geodis::synthlab::experiment::{ExperimentConfig, KernelChoice, Setting};
use geodis::synthlab::kernel_drift;

const MAX_SIZE: usize = 120;

fn setting(preset: &str) -> Result<Setting> {
    let cfg: ExperimentConfig = serde_json::from_value(json!({
        "preset": preset,
        "estimators": [],
        "n": [],
        "grid_points_per_axis": 24,
        "seed": 1,
    }))?;
    Setting::new(&cfg)
}

fn kernel_choice(name: &str) -> Result<KernelChoice> {
    match name {
        "iso" => Ok(KernelChoice::Iso),
        "transported" => Ok(KernelChoice::Transported),
        other => Err(Error::config("kernel", format!("demo supports iso and transported, not `{other}`"))),
    }
}

/// `[x_lo, x_hi, y_lo, y_hi]` of the evaluation region of `preset`.
pub fn bounds(preset: &str) -> Result<Vec<f64>> {
    let s = setting(preset)?;
    Ok(vec![s.region.lower[0], s.region.upper[0], s.region.lower[1], s.region.upper[1]])
}

/// Row-major `size × size` values of `κ(y; u)` over the region, `y` varying, anchor `u` fixed.
pub fn heatmap(preset: &str, kernel: &str, h: f64, u: [f64; 2], size: usize) -> Result<Vec<f64>> {
    if !(2..=MAX_SIZE).contains(&size) {
        return Err(Error::config("size", format!("must lie in 2..={MAX_SIZE}")));
    }
    let s = setting(preset)?;
    let region = EvaluationRegion::new(s.region.lower.clone(), s.region.upper.clone(), size)?;
    let grid = make_grid(&region)?;
    let k = s.kernel(kernel_choice(kernel)?, h, None)?;
    let gk = GridKernel::build(k.as_ref(), &grid, false)?;
    Ok(gk.forms().iter().map(|f| f.eval(&u)).collect())
}

/// Up to `count` counterfactual draws (row-major pairs) for overlaying on the heatmap.
pub fn samples(preset: &str, count: usize) -> Result<Vec<f64>> {
    let s = setting(preset)?;
    let law = s.dgp.eval_counterfactual_law(s.arm)?;
    law.sample(count.min(2000), &mut SeedPolicy::new(2).stream("demo"))
}

/// Peakiness of `kernel` at `count` log-spaced bandwidths in `[h_min, h_max]`, as JSON.
pub fn peakiness_curve(preset: &str, kernel: &str, h_min: f64, h_max: f64, count: usize) -> Result<String> {
    if !(h_min > 0.0 && h_max > h_min && h_max < 1.0) || count < 2 {
        return Err(Error::config("h", "need 0 < h_min < h_max < 1 and at least two bandwidths"));
    }
    let s = setting(preset)?;
    let choice = kernel_choice(kernel)?;
    let hs: Vec<f64> = (0..count)
        .map(|i| h_min * (h_max / h_min).powf(i as f64 / (count - 1) as f64))
        .collect();
    let law = s.dgp.eval_counterfactual_law(s.arm)?;
    let draws = law.sample(60, &mut SeedPolicy::new(3).stream("demo-peak"))?;
    let fam = |h: f64| s.kernel(choice, h, None);
    let r = peakiness(&fam, &hs, &draws, &s.grid, false)?;
    Ok(json!({"h": r.h, "H": r.peakiness, "d_eff": r.d_eff, "slope": r.slope}).to_string())
}

/// Drift of the transported kernel under a noise-scaled score tilt, for `count`
/// tilt sizes up to `eps_max`, as JSON.
pub fn drift_curve(preset: &str, h: f64, eps_max: f64, count: usize) -> Result<String> {
    if !(eps_max > 0.0) || count < 2 {
        return Err(Error::config("eps", "need eps_max > 0 and at least two sizes"));
    }
    let s = setting(preset)?;
    let law = s.dgp.eval_counterfactual_law(s.arm)?;
    let draws = law.sample(1500, &mut SeedPolicy::new(4).stream("demo-drift"))?;
    let base = TransportedKernel::new(s.diffusion, s.geometry.clone(), h)?;
    let d = s.grid.dim;
    let probes: Vec<f64> = s.grid.points.chunks(d).step_by(37).flatten().copied().collect();
    let epss: Vec<f64> = (1..=count).map(|i| eps_max * i as f64 / count as f64).collect();
    let mut drift = Vec::with_capacity(count);
    for &eps in &epss {
        let score = perturb_score(s.geometry.clone(), eps, PerturbationMode::noise_scaled_tilt(d), s.diffusion)?;
        let k: Box<dyn SmoothingKernel> = Box::new(TransportedKernel::new(s.diffusion, Arc::new(score), h)?);
        let per_probe = kernel_drift(&base, k.as_ref(), &probes, &draws)?;
        drift.push((per_probe.iter().map(|v| v * v).sum::<f64>() / per_probe.len() as f64).sqrt());
    }
    Ok(json!({"eps": epss, "drift": drift}).to_string())
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = regionBounds)]
pub fn region_bounds_js(preset: &str) -> std::result::Result<Vec<f64>, JsError> {
    bounds(preset).map_err(js)
}

#[wasm_bindgen(js_name = kernelHeatmap)]
pub fn kernel_heatmap_js(preset: &str, kernel: &str, h: f64, ux: f64, uy: f64, size: usize) -> std::result::Result<Vec<f64>, JsError> {
    heatmap(preset, kernel, h, [ux, uy], size).map_err(js)
}

#[wasm_bindgen(js_name = counterfactualSamples)]
pub fn samples_js(preset: &str, count: usize) -> std::result::Result<Vec<f64>, JsError> {
    samples(preset, count).map_err(js)
}

#[wasm_bindgen(js_name = peakinessCurve)]
pub fn peakiness_curve_js(preset: &str, kernel: &str, h_min: f64, h_max: f64, count: usize) -> std::result::Result<String, JsError> {
    peakiness_curve(preset, kernel, h_min, h_max, count).map_err(js)
}

#[wasm_bindgen(js_name = driftCurve)]
pub fn drift_curve_js(preset: &str, h: f64, eps_max: f64, count: usize) -> std::result::Result<String, JsError> {
    drift_curve(preset, h, eps_max, count).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_is_a_density_over_y() {
        let b = bounds("gauss2d").unwrap();
        let size = 60;
        let cell = (b[1] - b[0]) * (b[3] - b[2]) / (size * size) as f64;
        for kernel in ["iso", "transported"] {
            let v = heatmap("gauss2d", kernel, 0.5, [0.2, -0.1], size).unwrap();
            assert_eq!(v.len(), size * size);
            let mass: f64 = v.iter().sum::<f64>() * cell;
            assert!((mass - 1.0).abs() < 0.02, "{kernel}: {mass}");
        }
        assert!(heatmap("gauss2d", "pca", 0.5, [0.0, 0.0], 10).is_err());
        assert!(heatmap("gauss2d", "iso", 0.5, [0.0, 0.0], 1000).is_err());
    }

    #[test]
    fn curves_parse() {
        let p: serde_json::Value = serde_json::from_str(&peakiness_curve("gauss2d", "iso", 0.2, 0.6, 3).unwrap()).unwrap();
        assert_eq!(p["h"].as_array().unwrap().len(), 3);
        assert!(p["slope"].as_f64().unwrap() > 1.0);
        let d: serde_json::Value = serde_json::from_str(&drift_curve("gauss2d", 0.4, 0.2, 3).unwrap()).unwrap();
        let drift: Vec<f64> = d["drift"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(drift.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(samples("thin2d", 10).unwrap().len(), 20);
    }
}
