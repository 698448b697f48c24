//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EprError>;

#[derive(Debug, Error)]
pub enum EprError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at step {step} (t = {t}): last finite state {last_finite:?}")]
    NonFinite {
        step: usize,
        t: f64,
        last_finite: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model does not support this operation: {0}")]
    UnsupportedModel(String),

    #[error("closed form unavailable: {0}")]
    Unavailable(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("empty path: no time accumulated")]
    EmptyPath,

    #[error("degenerate limit: delta must be positive, got {0}")]
    DegenerateLimit(f64),

    #[error("horizon too short: {0}")]
    Horizon(String),

    #[error("parameter out of range: {0}")]
    Parameter(String),

    #[error("precondition rejected: {0}")]
    Rejected(String),

    #[error("model construction failed: {0}")]
    ModelConstruction(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
