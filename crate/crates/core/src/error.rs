use thiserror::Error;

/// Errors raised by the geometry, loss, training and diagnostics routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DagrError {
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("empty batch (rows={rows}, cols={cols})")]
    EmptyBatch { rows: usize, cols: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("potential is not monotone non-increasing near s={0}")]
    PotentialNotMonotone(f64),
    #[error("operation needs at least 2 modalities")]
    SingleModality,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is not unit-normalized")]
    NotNormalized,
    #[error("row {0} has a norm below the epsilon guard")]
    DegenerateNorm(usize),
    #[error("gradient groups differ: {0} vs {1}")]
    GroupMismatch(String, String),
    #[error("non-finite gradient in group {0}")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("matrix has full column rank {0}; null space is trivial")]
    TrivialNullSpace(usize),
    #[error("covariance has zero trace")]
    ZeroTrace,
    #[error("semantic margin needs at least two classes")]
    SingleClass,
    #[error("similarity sample is empty")]
    EmptySample,
    #[error("K={k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("invalid value for `{key}`: {reason}")]
    Range { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, DagrError>;
