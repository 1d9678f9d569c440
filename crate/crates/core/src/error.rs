use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("case `{case_id}`: {msg}")]
    Record { case_id: String, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint config does not match run config:\n{0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable reason code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidBox(_) => "invalid_box",
            Error::InvalidInput(_) => "invalid_input",
            Error::Record { .. } => "dataset_record",
            Error::Dataset(_) => "dataset",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
