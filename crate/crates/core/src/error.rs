use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing input file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data generation: {0}")]
    Generation(String),

    #[error("teacher construction check failed: {0}")]
    TeacherConstruction(String),

    #[error("training diverged in {stage} at step {step}: {detail}")]
    Divergence {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by user input (bad config, missing files,
    /// invalid arguments) rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::MissingFile(_) | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
