//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced at layer {layer} ({context})")]
    NonFinite { layer: usize, context: &'static str },

    #[error("gradient requested for an empty parameter set")]
    EmptyGradient,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("empty level set: acceptance rate below {min_rate} after {draws} draws")]
    EmptyLevelSet { min_rate: f64, draws: u64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint format version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u32, got: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
