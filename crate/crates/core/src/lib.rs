//! Geometry-adaptive counterfactual density and score estimation.
//!
//! The crate estimates smoothed counterfactual densities `p_{a,h}` and scores
//! `s_{a,h}` from observational data `(X, A, Y)` with cross-fitted one-step
//! estimators, using smoothing kernels whose shape follows the local geometry of
//! the outcome law (diffusion-transported kernels or a neighbourhood-PCA proxy).
//! It also provides multiplier-bootstrap simultaneous bands, peakiness and
//! effective-dimension diagnostics, and a synthetic laboratory with exact
//! population oracles.

pub mod diffusion;
pub mod domain;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod nuisance;
pub mod par;
pub mod peakiness;
pub mod plot;
pub mod rng;
pub mod score;
pub mod stats;
pub mod synthlab;

pub use error::{Error, Result};
