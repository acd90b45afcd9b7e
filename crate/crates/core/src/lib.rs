//! Simulation toolkit for self-organized aggregation of chemotactic bacteria.
//!
//! * [`mc`]: particle Monte Carlo for the two-stream kinetic model with an
//!   adapting internal state, coupled to a secreted chemoattractant.
//! * [`ks`]: Keller-Segel-type drift-diffusion limits.
//! * [`asymptotic`]: the large-adaptation-time phase-density equation.
//! * [`stability`]: dispersion relation and outcome classification.
//! * [`diagnostics`]: observables computed from runs.
//! * [`harness`]: configuration files, single runs and parameter sweeps.

pub mod asymptotic;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod harness;
pub mod ks;
pub mod mc;
pub mod model;
pub mod record;
pub mod stability;

pub use error::{Error, Result};
pub use field::{Grid1D, ScalarField};
pub use model::ModelParams;
