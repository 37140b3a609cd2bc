//! Shared error type for the whole pipeline.

use thiserror::Error;

/// Everything that can go wrong across the kernel, reward, model, environment
/// and harness layers. Validation failures carry the offending values so
/// callers can report them without re-deriving context.
#[derive(Debug, Error)]
pub enum CigError {
    #[error("ensemble must have at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("non-finite value in member {member} at step {step}")]
    NonFiniteInput { member: usize, step: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("ridge must be non-negative, got {0}")]
    NegativeRidge(f64),

    #[error("sigma2 must be positive, got {0}")]
    NonPositiveSigma2(f64),

    #[error("matrix is not positive definite: pivot {pivot} is non-positive")]
    NotPositiveDefinite { pivot: usize },

    #[error("non-positive diagonal disagreement at step {step}")]
    NonPositiveDiagonal { step: usize },

    #[error("full covariance dimension Td = {td} exceeds materialization cap {cap}")]
    MaterializationCap { td: usize, cap: usize },

    #[error("residual batch is empty")]
    EmptyBatch,

    #[error("negative residual {value} at index {index}")]
    NegativeResidual { index: usize, value: f64 },

    #[error("kNN batch size {batch} must exceed k = {k}")]
    KnnBatchTooSmall { batch: usize, k: usize },

    #[error("non-finite embedding passed to elliptical bonus")]
    NonFiniteEmbedding,

    #[error("non-finite loss in ensemble member {member}")]
    NonFiniteLoss { member: usize },

    #[error("invalid action {action}: environment has {count} actions")]
    InvalidAction { action: usize, count: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed input at line {line}: {message}")]
    MalformedInput { line: usize, message: String },

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CigError>;
