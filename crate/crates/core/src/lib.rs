//! Rare-event probability optimization by dynamic importance sampling.
//!
//! A model supplies `G(X, θ) ∈ R^m` for an input `X ∈ R^h` and decision
//! `θ ∈ Θ ⊂ R^d`. The crate estimates `E[exp(−n φ(Ȳ_n))]` for the sample mean
//! `Ȳ_n` of `G(X_i, θ)`, builds subsolution-based tilts, solves the limiting
//! large-deviations problem and optimizes `θ` with projected gradients.

pub mod buffered;
pub mod convex;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod optimize;
pub mod presets;
pub mod quadrature;
pub mod rng;
pub mod subsolution;

pub use distributions::TiltableDistribution;
pub use error::{Error, Result};
pub use estimators::{EstimateSummary, Parallelism, SimulationSpec};
pub use model::{MgfConfig, Model, ModelFamily, ThetaBox};
pub use objective::{Estimator, EstimatorKind, PhiMode, SmoothingPhi};
pub use subsolution::{GeneralizedControl, Scheme};
