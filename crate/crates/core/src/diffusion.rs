//! Variance-preserving forward diffusion and its deterministic probability flow.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::ScoreField;

/// Rate schedule `β(t)` of the forward SDE `dZ = -½β(t)Z dt + √β(t) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateSchedule {
    Constant { beta: f64 },
    Linear { beta0: f64, beta1: f64 },
}

impl Default for RateSchedule {
    fn default() -> Self {
        RateSchedule::Constant { beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardDiffusionSpec {
    #[serde(default)]
    pub schedule: RateSchedule,
    /// `ε_h = h^time_power`.
    #[serde(default = "default_time_power")]
    pub time_power: f64,
    /// Fixed RK4 step count for the probability flow.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_time_power() -> f64 {
    2.0
}

fn default_steps() -> usize {
    64
}

impl Default for ForwardDiffusionSpec {
    fn default() -> Self {
        Self {
            schedule: RateSchedule::default(),
            time_power: default_time_power(),
            steps: default_steps(),
        }
    }
}

impl ForwardDiffusionSpec {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.schedule {
            RateSchedule::Constant { beta } if !(beta > 0.0 && beta.is_finite()) => {
                return Err(Error::config("schedule.beta", "must be positive"))
            }
            RateSchedule::Linear { beta0, beta1 }
                if !(beta0 > 0.0 && beta1 > 0.0 && beta0.is_finite() && beta1.is_finite()) =>
            {
                return Err(Error::config("schedule", "linear rates must be positive on [0,1]"))
            }
            _ => {}
        }
        if !(self.time_power > 0.0) {
            return Err(Error::config("time_power", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self.schedule {
            RateSchedule::Constant { beta } => beta,
            RateSchedule::Linear { beta0, beta1 } => beta0 + (beta1 - beta0) * t,
        }
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        match self.schedule {
            RateSchedule::Constant { beta } => beta * t,
            RateSchedule::Linear { beta0, beta1 } => beta0 * t + 0.5 * (beta1 - beta0) * t * t,
        }
    }

    /// Mean-decay factor `α_t = exp(-½∫₀ᵗβ)`.
    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.integrated_beta(t)).exp()
    }

    /// Transition variance `1 - α_t²`, computed without cancellation.
    pub fn noise_var(&self, t: f64) -> f64 {
        -(-self.integrated_beta(t)).exp_m1()
    }

    /// Diffusion time matched to spatial scale `h`.
    pub fn eps_for(&self, h: f64) -> Result<f64> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config("h", format!("scale must be positive, got {h}")));
        }
        let eps = h.powf(self.time_power);
        if eps > 1.0 {
            return Err(Error::config("h", format!("diffusion time ε_h = {eps} exceeds 1")));
        }
        Ok(eps)
    }
}

/// Gaussian transition `q_eps(· | u)`: mean `α u`, covariance `(1-α²) I`.
/// Any positive time is accepted here; kernels restrict themselves to `(0, 1]`.
pub fn forward_transition(spec: &ForwardDiffusionSpec, eps: f64, u: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("eps", format!("diffusion time must be positive, got {eps}")));
    }
    let a = spec.alpha(eps);
    let d = u.len();
    Ok((
        u.iter().map(|v| a * v).collect(),
        DMatrix::identity(d, d) * spec.noise_var(eps),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    /// Integrate from `t = eps` down to 0 (the map `Φ`).
    NoisyToClean,
    /// Integrate from 0 up to `eps` (the map `Φ⁻¹`).
    CleanToNoisy,
}

#[derive(Debug, Clone)]
pub struct FlowEndpoint {
    pub endpoint: Vec<f64>,
    /// `log |det ∂endpoint/∂start|`.
    pub log_jacobian: f64,
    /// Full Jacobian of the map, when requested.
    pub jacobian: Option<DMatrix<f64>>,
}

const MAX_DIM: usize = 8;
const FD_DIV_STEP: f64 = 1e-5;

/// Integrates `dz/dt = -½β(t){z + s(z,t)}` with fixed-step RK4, carrying the
/// divergence integral (and optionally the variational matrix) alongside.
pub fn reverse_flow(
    spec: &ForwardDiffusionSpec,
    score: &dyn ScoreField,
    eps: f64,
    z_start: &[f64],
    direction: FlowDirection,
    with_jacobian: bool,
) -> Result<FlowEndpoint> {
    let d = z_start.len();
    if d == 0 || d > MAX_DIM {
        return Err(Error::config("dim", format!("flow dimension must be in 1..={MAX_DIM}")));
    }
    if score.dim() != d {
        return Err(Error::Wiring(format!("score field of dimension {} for a {d}-vector", score.dim())));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::config("eps", format!("diffusion time must lie in (0,1], got {eps}")));
    }
    let (t0, t1) = match direction {
        FlowDirection::NoisyToClean => (eps, 0.0),
        FlowDirection::CleanToNoisy => (0.0, eps),
    };
    let steps = spec.steps.max(1);
    let dt = (t1 - t0) / steps as f64;

    // state layout: z (d), log-jac (1), M (d*d, optional)
    let m_len = if with_jacobian { d * d } else { 0 };
    let len = d + 1 + m_len;
    let mut state = vec![0.0; len];
    state[..d].copy_from_slice(z_start);
    if with_jacobian {
        for i in 0..d {
            state[d + 1 + i * d + i] = 1.0;
        }
    }
    let mut ws = Workspace::new(d);
    let mut k1 = vec![0.0; len];
    let mut k2 = vec![0.0; len];
    let mut k3 = vec![0.0; len];
    let mut k4 = vec![0.0; len];
    let mut tmp = vec![0.0; len];

    let mut t = t0;
    for step in 0..steps {
        rhs(spec, score, t, &state, d, with_jacobian, &mut ws, &mut k1);
        axpy(&state, 0.5 * dt, &k1, &mut tmp);
        rhs(spec, score, t + 0.5 * dt, &tmp, d, with_jacobian, &mut ws, &mut k2);
        axpy(&state, 0.5 * dt, &k2, &mut tmp);
        rhs(spec, score, t + 0.5 * dt, &tmp, d, with_jacobian, &mut ws, &mut k3);
        axpy(&state, dt, &k3, &mut tmp);
        rhs(spec, score, t + dt, &tmp, d, with_jacobian, &mut ws, &mut k4);
        for i in 0..len {
            state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t = t0 + (step + 1) as f64 * dt;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowBlowup { time: t });
        }
    }
    let jacobian = with_jacobian.then(|| DMatrix::from_row_slice(d, d, &state[d + 1..]));
    Ok(FlowEndpoint {
        endpoint: state[..d].to_vec(),
        log_jacobian: state[d],
        jacobian,
    })
}

struct Workspace {
    s: Vec<f64>,
    jac: Vec<f64>,
    zp: Vec<f64>,
    sp: Vec<f64>,
    sm: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            s: vec![0.0; d],
            jac: vec![0.0; d * d],
            zp: vec![0.0; d],
            sp: vec![0.0; d],
            sm: vec![0.0; d],
        }
    }
}

fn axpy(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for i in 0..x.len() {
        out[i] = x[i] + a * y[i];
    }
}

#[allow(clippy::too_many_arguments)]
fn rhs(
    spec: &ForwardDiffusionSpec,
    score: &dyn ScoreField,
    t: f64,
    state: &[f64],
    d: usize,
    with_jacobian: bool,
    ws: &mut Workspace,
    out: &mut [f64],
) {
    let z = &state[..d];
    let hb = 0.5 * spec.beta(t);
    score.score(z, t, &mut ws.s);
    for i in 0..d {
        out[i] = -hb * (z[i] + ws.s[i]);
    }
    let have_jac = score.jacobian(z, t, &mut ws.jac);
    if !have_jac {
        // central differences of the score, column by column
        for j in 0..d {
            ws.zp.copy_from_slice(z);
            ws.zp[j] = z[j] + FD_DIV_STEP;
            score.score(&ws.zp, t, &mut ws.sp);
            ws.zp[j] = z[j] - FD_DIV_STEP;
            score.score(&ws.zp, t, &mut ws.sm);
            for i in 0..d {
                ws.jac[i * d + j] = (ws.sp[i] - ws.sm[i]) / (2.0 * FD_DIV_STEP);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| ws.jac[i * d + i]).sum();
    out[d] = -hb * (d as f64 + trace);
    if with_jacobian {
        // dM/dt = ∇f · M with ∇f = -½β (I + ∇s)
        let m = &state[d + 1..];
        for i in 0..d {
            for j in 0..d {
                let mut acc = m[i * d + j];
                for k in 0..d {
                    acc += ws.jac[i * d + k] * m[k * d + j];
                }
                out[d + 1 + i * d + j] = -hb * acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_closed_form() {
        let spec = ForwardDiffusionSpec::default();
        let eps = 4f64.ln();
        let (mean, cov) = forward_transition(&spec, eps, &[2.0, -4.0]).unwrap();
        assert!((mean[0] - 1.0).abs() < 1e-12 && (mean[1] + 2.0).abs() < 1e-12);
        assert!((cov[(0, 0)] - 0.75).abs() < 1e-12 && cov[(0, 1)] == 0.0);
        let (m0, _) = forward_transition(&spec, 0.3, &[0.0]).unwrap();
        assert_eq!(m0[0], 0.0);
        let (m, c) = forward_transition(&spec, 1e-9, &[1.5]).unwrap();
        assert!((m[0] - 1.5).abs() < 1e-8 && c[(0, 0)] < 1e-8);
        assert!(forward_transition(&spec, 0.0, &[1.0]).is_err());
    }

    #[test]
    fn integrated_rate_matches_numeric_integral() {
        let spec = ForwardDiffusionSpec {
            schedule: RateSchedule::Linear { beta0: 0.1, beta1: 20.0 },
            ..Default::default()
        };
        let t = 0.7;
        let m = 10_000;
        let numeric: f64 = (0..m).map(|i| spec.beta((i as f64 + 0.5) * t / m as f64) * t / m as f64).sum();
        assert!((numeric - spec.integrated_beta(t)).abs() < 1e-9);
    }

    #[test]
    fn eps_map() {
        let spec = ForwardDiffusionSpec::default();
        assert!((spec.eps_for(0.2).unwrap() - 0.04).abs() < 1e-15);
        assert!(spec.eps_for(0.0).is_err());
        assert!(spec.eps_for(1.5).is_err());
    }
}
