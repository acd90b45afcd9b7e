use std::fmt;

use thiserror::Error;

/// A single violated parameter constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub value: f64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (got {} = {})", self.message, self.field, self.value)
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {}", join_violations(.0))]
    InvalidParams(Vec<Violation>),

    #[error("invalid dimensional parameter {field}: {value} (must be > 0)")]
    InvalidDimensional { field: &'static str, value: f64 },

    #[error("non-positive concentration {value} at index {index}")]
    NonPositiveConcentration { index: usize, value: f64 },

    #[error("time step {dt} exceeds the explicit stability bound {limit}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("tumble probability {probability} per step is not below 1; reduce dt")]
    ProbabilityOverflow { probability: f64 },

    #[error("singular linear system")]
    SingularSystem,

    #[error("negative density {value} at cell {index}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("field blow-up: max value {value} exceeds {limit}")]
    FieldBlowup { value: f64, limit: f64 },

    #[error("internal-state domain too small: boundary mass fraction {fraction:e}")]
    DomainTooSmall { fraction: f64 },

    #[error("deviation series does not cover [{from}, {to}]")]
    InsufficientCoverage { from: f64, to: f64 },

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
