use rolldiff_nn::{CheckpointError, NnError};
use thiserror::Error;

/// Failures of the network and diffusion code.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("spatial dims {h}×{w} must be even")]
    OddSpatialDims { h: usize, w: usize },
    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("schedule requires 0 < beta_start < beta_end < 1 and T ≥ 2")]
    BadRange,
    #[error("empty batch")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;
