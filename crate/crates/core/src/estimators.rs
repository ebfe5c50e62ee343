//! One-step (DIS, DSS, Stein) and plug-in estimators on an evaluation grid.
//!
//! Each estimator averages an uncentered influence value `φ_i(y)` over units; the
//! same values give the variance `σ̂²(y)` and, when kept, the centred influence
//! matrix consumed by the multiplier bands.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::domain::{fmt_f64, Grid, ObservationBatch};
use crate::error::{Error, Result};
use crate::kernel::GridKernel;
use crate::nuisance::{check_wiring, NuisanceView};
use crate::par;
use crate::peakiness::csv_err;
use crate::rng::SeedPolicy;

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub clip_events: usize,
    pub truncations: usize,
    /// Grid points where a one-step density value is negative (not clamped).
    pub negative_points: usize,
    /// Per-point flags (`negative`, `truncated`, or empty).
    pub flags: Vec<String>,
}

/// Estimates on every grid point.
#[derive(Debug, Clone, Serialize)]
pub struct GridEstimate {
    pub estimator: String,
    pub kernel_fingerprint: String,
    pub grid_fingerprint: String,
    pub n: usize,
    pub dim: usize,
    /// 1 for densities, `dim` for scores.
    pub value_dim: usize,
    /// Row-major `len × value_dim`.
    pub values: Vec<f64>,
    /// Influence variance per point and value coordinate, `len × value_dim`.
    pub sigma2: Vec<f64>,
    /// Centred influence values `[p][i]` (density estimates only, when requested).
    #[serde(skip)]
    pub influence: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl GridEstimate {
    pub fn len(&self) -> usize {
        self.values.len() / self.value_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, p: usize) -> &[f64] {
        &self.values[p * self.value_dim..(p + 1) * self.value_dim]
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| v.sqrt()).collect()
    }

    /// CSV with columns `y0..,value..,sigma2..,flags`.
    pub fn write_csv<W: Write>(&self, grid: &Grid, w: W) -> Result<()> {
        if grid.fingerprint() != self.grid_fingerprint {
            return Err(Error::GridMismatch("estimate was computed on another grid".into()));
        }
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..grid.dim).map(|j| format!("y{j}")).collect();
        if self.value_dim == 1 {
            header.push("value".into());
            header.push("sigma2".into());
        } else {
            header.extend((0..self.value_dim).map(|j| format!("value{j}")));
            header.extend((0..self.value_dim).map(|j| format!("sigma2_{j}")));
        }
        header.push("flags".into());
        wr.write_record(&header).map_err(csv_err)?;
        for p in 0..self.len() {
            let mut rec: Vec<String> = grid.point(p).iter().map(|v| fmt_f64(*v)).collect();
            rec.extend(self.value(p).iter().map(|v| fmt_f64(*v)));
            rec.extend(self.sigma2[p * self.value_dim..(p + 1) * self.value_dim].iter().map(|v| fmt_f64(*v)));
            rec.push(self.diagnostics.flags.get(p).cloned().unwrap_or_default());
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Options shared by the grid estimators.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateOptions {
    /// Keep the centred `[p][i]` influence matrix (needed for bands).
    pub keep_influence: bool,
}

fn check_inputs(batch: &ObservationBatch, outcomes: &[f64], gk: &GridKernel) -> Result<()> {
    if outcomes.len() != batch.n * gk.dim() {
        return Err(Error::Wiring("outcomes are not in grid coordinates".into()));
    }
    Ok(())
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var)
}

/// Uncentered DIS influence values at grid point `p` for every unit.
#[inline]
fn dis_phi(batch: &ObservationBatch, outcomes: &[f64], arm: i64, nuis: &dyn NuisanceView, gk: &GridKernel, p: usize, out: &mut [f64]) {
    let d = gk.dim();
    for i in 0..batch.n {
        let m = nuis.mu(i, p);
        out[i] = if batch.a[i] == arm {
            let k = gk.eval(p, &outcomes[i * d..(i + 1) * d]);
            m + (k - m) / nuis.pi(i)
        } else {
            m
        };
    }
}

/// Diffusion-informed smoothing: per-point mean of `φ = 1{A=a}/π̂ (κ - μ̂) + μ̂`.
pub fn dis_estimate(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    nuis: &dyn NuisanceView,
    gk: &GridKernel,
    opts: EstimateOptions,
) -> Result<GridEstimate> {
    check_inputs(batch, outcomes, gk)?;
    check_wiring(nuis, gk, arm, batch.n)?;
    let n = batch.n;
    let per_point = par::map_indexed(gk.len(), |p| {
        let mut phi = vec![0.0; n];
        dis_phi(batch, outcomes, arm, nuis, gk, p, &mut phi);
        let (m, v) = mean_var(&phi);
        if opts.keep_influence {
            phi.iter_mut().for_each(|x| *x -= m);
            (m, v, Some(phi))
        } else {
            (m, v, None)
        }
    });
    Ok(assemble_density("dis", batch, gk, per_point, nuis.clip_events(), true))
}

fn assemble_density(
    name: &str,
    batch: &ObservationBatch,
    gk: &GridKernel,
    per_point: Vec<(f64, f64, Option<Vec<f64>>)>,
    clip_events: usize,
    one_step: bool,
) -> GridEstimate {
    let mut values = Vec::with_capacity(per_point.len());
    let mut sigma2 = Vec::with_capacity(per_point.len());
    let mut influence: Option<Vec<f64>> = per_point.first().and_then(|x| x.2.as_ref()).map(|_| Vec::new());
    let mut flags = Vec::with_capacity(per_point.len());
    let mut negative = 0;
    for (m, v, inf) in per_point {
        values.push(m);
        sigma2.push(v);
        if one_step && m < 0.0 {
            negative += 1;
            flags.push("negative".to_string());
        } else {
            flags.push(String::new());
        }
        if let (Some(all), Some(inf)) = (influence.as_mut(), inf) {
            all.extend_from_slice(&inf);
        }
    }
    GridEstimate {
        estimator: name.into(),
        kernel_fingerprint: gk.kernel_fingerprint().into(),
        grid_fingerprint: gk.grid_fingerprint().into(),
        n: batch.n,
        dim: gk.dim(),
        value_dim: 1,
        values,
        sigma2,
        influence,
        diagnostics: Diagnostics {
            clip_events,
            truncations: 0,
            negative_points: negative,
            flags,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PluginMode {
    /// Plain average of `κ` over the arm.
    IpwFree,
    /// Stabilised inverse-propensity weighting.
    Ipw,
}

/// Plug-in density without influence correction. `propensity` holds `π̂(x_i)` per unit.
pub fn plugin_estimate(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    propensity: Option<&[f64]>,
    gk: &GridKernel,
    mode: PluginMode,
    opts: EstimateOptions,
) -> Result<GridEstimate> {
    check_inputs(batch, outcomes, gk)?;
    let weights: Vec<f64> = match mode {
        PluginMode::IpwFree => batch.a.iter().map(|&l| if l == arm { 1.0 } else { 0.0 }).collect(),
        PluginMode::Ipw => {
            let pi = propensity.ok_or_else(|| Error::config("propensity", "ipw mode requires a propensity model"))?;
            if pi.len() != batch.n {
                return Err(Error::Wiring("propensity vector length".into()));
            }
            batch
                .a
                .iter()
                .zip(pi)
                .map(|(&l, &p)| if l == arm { 1.0 / p } else { 0.0 })
                .collect()
        }
    };
    weighted_density(
        match mode {
            PluginMode::IpwFree => "plugin-ipw-free",
            PluginMode::Ipw => "plugin-ipw",
        },
        batch,
        outcomes,
        arm,
        &weights,
        gk,
        opts,
    )
}

/// `Σ w_i κ(y; Y_i) / Σ w_i` with its linearised influence
/// `φ_i = w_i (κ_i - p̂) / mean(w)`.
fn weighted_density(
    name: &str,
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    weights: &[f64],
    gk: &GridKernel,
    opts: EstimateOptions,
) -> Result<GridEstimate> {
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::EmptyArm(arm));
    }
    let n = batch.n;
    let wbar = wsum / n as f64;
    let d = gk.dim();
    let per_point = par::map_indexed(gk.len(), |p| {
        let mut kv = vec![0.0; n];
        let mut num = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                kv[i] = gk.eval(p, &outcomes[i * d..(i + 1) * d]);
                num += weights[i] * kv[i];
            }
        }
        let est = num / wsum;
        let mut phi: Vec<f64> = (0..n).map(|i| weights[i] * (kv[i] - est) / wbar).collect();
        let var = phi.iter().map(|x| x * x).sum::<f64>() / n as f64;
        if opts.keep_influence {
            let m = phi.iter().sum::<f64>() / n as f64;
            phi.iter_mut().for_each(|x| *x -= m);
            (est, var, Some(phi))
        } else {
            (est, var, None)
        }
    });
    Ok(assemble_density(name, batch, gk, per_point, 0, false))
}

/// Diffusion-informed score smoothing: the score estimate together with its
/// density (`P̂`) and gradient (`Ĝ`) components.
#[derive(Debug, Clone, Serialize)]
pub struct DssEstimate {
    pub score: GridEstimate,
    pub density: GridEstimate,
    /// `Ĝ = ∇p̂`, `len × dim`.
    pub gradient: GridEstimate,
    pub floor: f64,
}

/// Denominator truncation level for [`dss_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DssFloor {
    /// `1e-4 · max_y P̂(y)`.
    RelativeToPeak,
    Fixed(f64),
}

pub fn dss_estimate(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    nuis: &dyn NuisanceView,
    gk: &GridKernel,
    floor: DssFloor,
) -> Result<DssEstimate> {
    if let DssFloor::Fixed(f) = floor {
        if !(f > 0.0) {
            return Err(Error::config("floor", "must be positive"));
        }
    }
    check_inputs(batch, outcomes, gk)?;
    check_wiring(nuis, gk, arm, batch.n)?;
    if !nuis.has_grad() || !gk.has_grad() {
        return Err(Error::Wiring("score estimation needs gradient regressions and kernel gradients".into()));
    }
    let n = batch.n;
    let d = gk.dim();
    // per point: (P, var P, G[d], var G[d], φ_P, φ_G) summarised to the score after the floor is known
    let comps = par::map_indexed(gk.len(), |p| {
        let mut phi_p = vec![0.0; n];
        let mut phi_g = vec![0.0; n * d];
        score_phi(batch, outcomes, arm, nuis, gk, p, &mut phi_p, &mut phi_g);
        (phi_p, phi_g)
    });
    let len = gk.len();
    let mut p_hat = vec![0.0; len];
    let mut p_var = vec![0.0; len];
    let mut g_hat = vec![0.0; len * d];
    let mut g_var = vec![0.0; len * d];
    for (p, (phi_p, phi_g)) in comps.iter().enumerate() {
        let (m, v) = mean_var(phi_p);
        p_hat[p] = m;
        p_var[p] = v;
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| phi_g[i * d + j]).collect();
            let (m, v) = mean_var(&col);
            g_hat[p * d + j] = m;
            g_var[p * d + j] = v;
        }
    }
    let floor = match floor {
        DssFloor::Fixed(f) => f,
        DssFloor::RelativeToPeak => {
            let peak = p_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(peak > 0.0) {
                return Err(Error::Data("density estimate is nonpositive on the whole grid".into()));
            }
            1e-4 * peak
        }
    };
    let mut s_hat = vec![0.0; len * d];
    let mut s_var = vec![0.0; len * d];
    let mut flags = Vec::with_capacity(len);
    let mut truncations = 0;
    for (p, (phi_p, phi_g)) in comps.iter().enumerate() {
        let denom = if p_hat[p] < floor {
            truncations += 1;
            flags.push("truncated".to_string());
            floor
        } else {
            flags.push(String::new());
            p_hat[p]
        };
        for j in 0..d {
            let s = g_hat[p * d + j] / denom;
            s_hat[p * d + j] = s;
            // φ_s = (φ_G - s φ_P) / P, centred
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for i in 0..n {
                let v = (phi_g[i * d + j] - s * phi_p[i]) / denom;
                acc += v;
                acc2 += v * v;
            }
            let m = acc / n as f64;
            s_var[p * d + j] = (acc2 / n as f64 - m * m).max(0.0);
        }
    }
    let mk = |name: &str, value_dim: usize, values: Vec<f64>, sigma2: Vec<f64>, flags: Vec<String>, truncations: usize| GridEstimate {
        estimator: name.into(),
        kernel_fingerprint: gk.kernel_fingerprint().into(),
        grid_fingerprint: gk.grid_fingerprint().into(),
        n,
        dim: d,
        value_dim,
        values,
        sigma2,
        influence: None,
        diagnostics: Diagnostics {
            clip_events: nuis.clip_events(),
            truncations,
            negative_points: 0,
            flags,
        },
    };
    let negative = p_hat.iter().filter(|v| **v < 0.0).count();
    let mut density = mk("dis", 1, p_hat, p_var, vec![String::new(); len], 0);
    density.diagnostics.negative_points = negative;
    Ok(DssEstimate {
        score: mk("dss", d, s_hat, s_var, flags, truncations),
        density,
        gradient: mk("dss-gradient", d, g_hat, g_var, vec![String::new(); len], 0),
        floor,
    })
}

/// Uncentered influence values of `P̂` and `Ĝ` at grid point `p`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn score_phi(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    nuis: &dyn NuisanceView,
    gk: &GridKernel,
    p: usize,
    phi_p: &mut [f64],
    phi_g: &mut [f64],
) {
    let d = gk.dim();
    let mut nu = [0.0f64; 8];
    let mut g = [0.0f64; 8];
    for i in 0..batch.n {
        let m = nuis.mu(i, p);
        nuis.nu(i, p, &mut nu[..d]);
        if batch.a[i] == arm {
            let w = 1.0 / nuis.pi(i);
            let k = gk.grad(p, &outcomes[i * d..(i + 1) * d], &mut g[..d]);
            phi_p[i] = m + w * (k - m);
            for j in 0..d {
                phi_g[i * d + j] = nu[j] + w * (g[j] - nu[j]);
            }
        } else {
            phi_p[i] = m;
            phi_g[i * d..(i + 1) * d].copy_from_slice(&nu[..d]);
        }
    }
}

/// Smooth test fields `g(y) = c · exp(-‖y‖²/2)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestField {
    pub id: String,
    pub c: Vec<f64>,
}

impl TestField {
    pub fn new(id: impl Into<String>, c: Vec<f64>) -> Self {
        Self { id: id.into(), c }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new("zero", vec![0.0; dim])
    }

    /// Writes `g(y)` and returns `∇·g(y) = -(cᵀy) exp(-‖y‖²/2)`.
    #[inline]
    pub fn eval(&self, y: &[f64], out: &mut [f64]) -> f64 {
        let e = (-0.5 * y.iter().map(|v| v * v).sum::<f64>()).exp();
        let mut cy = 0.0;
        for j in 0..y.len() {
            out[j] = self.c[j] * e;
            cy += self.c[j] * y[j];
        }
        -cy * e
    }
}

/// `g_j = e_j exp(-‖y‖²/2)` for each axis, plus `extra` seeded unit-norm combinations.
pub fn default_test_class(dim: usize, extra: usize, seed: &SeedPolicy) -> Vec<TestField> {
    let mut out: Vec<TestField> = (0..dim)
        .map(|j| {
            let mut c = vec![0.0; dim];
            c[j] = 1.0;
            TestField::new(format!("e{j}"), c)
        })
        .collect();
    let mut rng = seed.stream("test-fields");
    for r in 0..extra {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        c.iter_mut().for_each(|v| *v /= norm);
        out.push(TestField::new(format!("mix{r}"), c));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SteinEstimate {
    pub field_id: String,
    pub value: f64,
    /// Variance of the per-unit influence values; the estimator variance is `sigma2 / n`.
    pub sigma2: f64,
    pub n: usize,
    /// Centred per-unit influence values.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

impl SteinEstimate {
    pub fn std_error(&self) -> f64 {
        (self.sigma2 / self.n as f64).sqrt()
    }
}

pub fn write_stein_csv<W: Write>(estimates: &[SteinEstimate], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["g_id", "value", "sigma2"]).map_err(csv_err)?;
    for e in estimates {
        wr.write_record([e.field_id.clone(), fmt_f64(e.value), fmt_f64(e.sigma2)]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Chunk count for the deterministic reduction of per-unit influence sums.
const REDUCE_CHUNKS: usize = 16;

/// `Ψ̂(g) = Σ_p w {(∇·g) P̂ + gᵀĜ}` for every field in one pass, with the exactly
/// linear per-unit influence values.
pub fn stein_estimate(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    nuis: &dyn NuisanceView,
    gk: &GridKernel,
    grid: &Grid,
    fields: &[TestField],
) -> Result<Vec<SteinEstimate>> {
    check_inputs(batch, outcomes, gk)?;
    check_wiring(nuis, gk, arm, batch.n)?;
    gk.check_grid(grid)?;
    if !nuis.has_grad() || !gk.has_grad() {
        return Err(Error::Wiring("Stein estimation needs gradient regressions and kernel gradients".into()));
    }
    stein_pass(batch.n, gk, grid, fields, "stein", |p, phi_p, phi_g| {
        score_phi(batch, outcomes, arm, nuis, gk, p, phi_p, phi_g)
    })
}

/// `Ψ̂(g) = Σ_p w {∇·g + gᵀs} P̂` with a supplied score `s` (`len × dim`) and a
/// density estimate that kept its influence. With the exact smoothed score this
/// is a Stein discrepancy of `P̂`, centred at zero.
pub fn stein_with_score(est: &GridEstimate, score: &[f64], grid: &Grid, fields: &[TestField]) -> Result<Vec<SteinEstimate>> {
    let inf = est
        .influence
        .as_ref()
        .ok_or_else(|| Error::Wiring("estimate was computed without keep_influence".into()))?;
    let d = grid.dim;
    if est.value_dim != 1 || est.len() != grid.len() || score.len() != grid.len() * d {
        return Err(Error::GridMismatch("density estimate, score and grid differ in shape".into()));
    }
    if fields.iter().any(|f| f.c.len() != d) {
        return Err(Error::config("fields", "test field dimension differs from the grid"));
    }
    let n = est.n;
    let mut g = vec![0.0; d];
    Ok(fields
        .iter()
        .map(|field| {
            let mut value = 0.0;
            let mut psi = vec![0.0; n];
            for p in 0..grid.len() {
                let div = field.eval(grid.point(p), &mut g);
                let c = grid.weight * (div + (0..d).map(|j| g[j] * score[p * d + j]).sum::<f64>());
                if c == 0.0 {
                    continue;
                }
                value += c * est.values[p];
                for (t, v) in psi.iter_mut().zip(&inf[p * n..(p + 1) * n]) {
                    *t += c * v;
                }
            }
            let (_, v) = mean_var(&psi);
            SteinEstimate {
                field_id: field.id.clone(),
                value,
                sigma2: v,
                n,
                influence: psi,
            }
        })
        .collect())
}

/// Treated-only baseline: `P̂`, `Ĝ` are plain arm averages of `κ` and `∇κ`.
pub fn treated_only_stein(
    batch: &ObservationBatch,
    outcomes: &[f64],
    arm: i64,
    gk: &GridKernel,
    grid: &Grid,
    fields: &[TestField],
) -> Result<Vec<SteinEstimate>> {
    check_inputs(batch, outcomes, gk)?;
    gk.check_grid(grid)?;
    if !gk.has_grad() {
        return Err(Error::Wiring("kernel cache lacks gradients".into()));
    }
    let m = batch.a.iter().filter(|&&l| l == arm).count();
    if m == 0 {
        return Err(Error::EmptyArm(arm));
    }
    let scale = batch.n as f64 / m as f64;
    let d = gk.dim();
    stein_pass(batch.n, gk, grid, fields, "treated-only", |p, phi_p, phi_g| {
        let mut g = [0.0f64; 8];
        for i in 0..batch.n {
            if batch.a[i] == arm {
                let k = gk.grad(p, &outcomes[i * d..(i + 1) * d], &mut g[..d]);
                phi_p[i] = scale * k;
                for j in 0..d {
                    phi_g[i * d + j] = scale * g[j];
                }
            } else {
                phi_p[i] = 0.0;
                phi_g[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    })
}

fn stein_pass<F>(n: usize, gk: &GridKernel, grid: &Grid, fields: &[TestField], _name: &str, phi: F) -> Result<Vec<SteinEstimate>>
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    let d = gk.dim();
    let nf = fields.len();
    if fields.iter().any(|f| f.c.len() != d) {
        return Err(Error::config("fields", "test field dimension differs from the grid"));
    }
    // field coefficients per grid point: (w ∇·g, w g)
    let coef: Vec<(f64, Vec<f64>)> = (0..grid.len())
        .flat_map(|p| {
            let y = grid.point(p);
            fields
                .iter()
                .map(|f| {
                    let mut g = vec![0.0; d];
                    let div = f.eval(y, &mut g);
                    g.iter_mut().for_each(|v| *v *= grid.weight);
                    (div * grid.weight, g)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let len = gk.len();
    let chunks = REDUCE_CHUNKS.min(len.max(1));
    let partial = par::map_indexed(chunks, |c| {
        let lo = c * len / chunks;
        let hi = (c + 1) * len / chunks;
        let mut acc = vec![0.0; nf * n];
        let mut phi_p = vec![0.0; n];
        let mut phi_g = vec![0.0; n * d];
        for p in lo..hi {
            phi(p, &mut phi_p, &mut phi_g);
            for (f, (wdiv, wg)) in coef[p * nf..(p + 1) * nf].iter().enumerate() {
                if *wdiv == 0.0 && wg.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let row = &mut acc[f * n..(f + 1) * n];
                for i in 0..n {
                    let mut v = wdiv * phi_p[i];
                    for j in 0..d {
                        v += wg[j] * phi_g[i * d + j];
                    }
                    row[i] += v;
                }
            }
        }
        acc
    });
    let mut total = vec![0.0; nf * n];
    for part in &partial {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Ok(fields
        .iter()
        .enumerate()
        .map(|(f, field)| {
            let mut psi = total[f * n..(f + 1) * n].to_vec();
            let (m, v) = mean_var(&psi);
            psi.iter_mut().for_each(|x| *x -= m);
            SteinEstimate {
                field_id: field.id.clone(),
                value: m,
                sigma2: v,
                n,
                influence: psi,
            }
        })
        .collect())
}

/// Stabilised-IPW reference density on a pool disjoint from the working sample.
/// `ref_ids` and `working_ids` identify units across pools.
#[allow(clippy::too_many_arguments)]
pub fn reference_proxy(
    batch_ref: &ObservationBatch,
    outcomes_ref: &[f64],
    ref_ids: &[u64],
    working_ids: &[u64],
    arm: i64,
    propensity_ref: &[f64],
    gk: &GridKernel,
) -> Result<GridEstimate> {
    if ref_ids.len() != batch_ref.n {
        return Err(Error::Wiring("reference ids".into()));
    }
    let working: std::collections::HashSet<u64> = working_ids.iter().copied().collect();
    let shared = ref_ids.iter().filter(|id| working.contains(id)).count();
    if shared > 0 {
        return Err(Error::Contamination(shared));
    }
    let mut est = plugin_estimate(
        batch_ref,
        outcomes_ref,
        arm,
        Some(propensity_ref),
        gk,
        PluginMode::Ipw,
        EstimateOptions::default(),
    )?;
    est.estimator = "reference-proxy".into();
    Ok(est)
}
