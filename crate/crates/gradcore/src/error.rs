use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("optimizer step requested before gradients were populated")]
    MissingGradients,
    #[error("precision mismatch: stored {stored}, requested {requested}")]
    Precision { stored: String, requested: String },
    #[error("malformed container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GradError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
