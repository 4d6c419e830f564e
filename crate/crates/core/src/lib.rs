//! Cost-penalized I-projection (CPIP) stochastic interventions for discrete
//! treatments, with cross-fitted one-step estimation of the expected outcome
//! under the tilted policies and multiplier-bootstrap uniform bands.

pub mod cli;
pub mod estimation;
pub mod exec;
pub mod inference;
pub mod nuisance;
pub mod simulation;
pub mod tilt;

pub use exec::Exec;
pub use tilt::{
    cpip_coupling, ipi_propensity, pushforward, tilt_weights, tilted_limits, tilted_source, tilted_target,
    ActionSpace, CostSpec, Coupling, PolicyTilt, Simplex, TiltConfig, TiltError, TiltWeights,
};
