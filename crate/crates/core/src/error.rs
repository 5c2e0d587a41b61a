use thiserror::Error;

use crate::training::TrainTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// A 2x2 covariance or precision block with non-positive determinant.
    #[error("block {index} is not positive definite (det = {det:e})")]
    NonPositiveDefinite { index: usize, det: f64 },

    #[error("variance at index {index} is not positive ({value:e})")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        trace: Box<TrainTrace>,
    },

    #[error("sequence too short: need {needed} steps, have {have}")]
    TooShort { needed: usize, have: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
