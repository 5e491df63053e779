use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlaError>;

#[derive(Debug, Error)]
pub enum GlaError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("log-gate {value} at ({row}, {col}) is positive; gates must lie in (0, 1]")]
    GateAboveOne { row: usize, col: usize, value: f64 },

    #[error(
        "decay dynamic range too large for parallel form; use chunkwise \
         (|exponent| = {exponent:.3} > {bound})"
    )]
    DecayRange { exponent: f64, bound: f64 },

    #[error("chunk plan covers length {plan} but sequence has length {seq}")]
    PlanMismatch { plan: usize, seq: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GlaError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        GlaError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
