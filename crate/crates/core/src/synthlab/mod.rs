//! Synthetic confounded designs with known counterfactual laws, population
//! oracles, error metrics, drift diagnostics and the replication runner.

pub mod dgp;
pub mod drift;
pub mod experiment;
pub mod metrics;
pub mod oracle;

pub use dgp::{ArmLaw, ConditionalComponent, ConditionalLaw, PositivityAudit, SyntheticDgp, PRESETS};
pub use drift::{drift_diagnostic, kernel_drift, DriftRow, DriftTable, PerturbedFamily};
pub use metrics::{ise, matched_ise, rate_from_replications, rate_slope, reference_ise, score_mse, RateCurve};
pub use oracle::{
    conditional_mean_oracle, mc_conditional_mean, population_density, population_score, quadrature_density, FormMixture,
    KernelOracle, PopulationTarget,
};
