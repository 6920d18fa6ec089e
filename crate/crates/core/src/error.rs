//! Error type shared by every module.

use thiserror::Error;

/// Failure modes of the simulation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SbqsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("step size |c*delta| = {value:e} exceeds guard {guard:e}")]
    StepSize { value: f64, guard: f64 },
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("delay {delay} is not on the history grid with spacing {delta}")]
    GridMismatch { delay: f64, delta: f64 },
    #[error("fock truncation too small: {0}")]
    Truncation(String),
    #[error("readout singularity: trace denominator {0:e} below threshold")]
    Readout(f64),
    #[error("scaling error: {0}")]
    Scaling(String),
    #[error("invalid density matrix: {0}")]
    Density(String),
}

pub type Result<T> = std::result::Result<T, SbqsError>;

impl SbqsError {
    /// True for failures caused by malformed input rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SbqsError::Dimension(_) | SbqsError::Argument(_) | SbqsError::Density(_)
        )
    }
}
