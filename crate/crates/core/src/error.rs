use std::path::PathBuf;

/// Errors raised by the model, attack and detection layers.
#[derive(Debug, thiserror::Error)]
pub enum SevitError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("labels are required for {0}")]
    MissingLabels(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("ensemble has no intermediate heads; fusion would reduce to the vanilla classifier")]
    DegenerateEnsemble,

    #[error("checkpoint {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SevitError>;

impl SevitError {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        SevitError::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
