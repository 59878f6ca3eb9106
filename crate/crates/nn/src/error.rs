use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{groups} groups do not divide {channels} channels")]
    GroupsDontDivideChannels { groups: usize, channels: usize },
    #[error("non-finite value produced by {0}")]
    NonFiniteOutput(&'static str),
    #[error("tape has no parameter store attached")]
    NoParamStore,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::ShapeMismatch { op, detail: detail.into() })
}
