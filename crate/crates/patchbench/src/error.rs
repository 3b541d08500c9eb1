use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("annotation schema error: missing or malformed key `{0}`")]
    Schema(String),

    #[error("referential integrity: {0}")]
    ReferentialIntegrity(String),

    #[error("model does not support capability `{0}`")]
    Capability(String),

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("fit error: {0}")]
    FitError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
