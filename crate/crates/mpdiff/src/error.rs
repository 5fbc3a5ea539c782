//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),
    /// A numerical guard tripped (e.g. schedule misuse near alpha_bar = 0).
    #[error("numerical guard: {0}")]
    NumericalGuard(String),
    /// Expensive-simulation output requested but absent for this record.
    #[error("unavailable simulation: {0}")]
    UnavailableSimulation(String),
    /// Calibration produced a non-finite loss.
    #[error("diverged calibration: {0}")]
    DivergedCalibration(String),
    /// A metric is undefined for the given inputs (e.g. zero denominator).
    #[error("undefined score: {0}")]
    UndefinedScore(String),
    /// Malformed file contents.
    #[error("format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for rejected/invalid inputs, 2 for i/o failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
