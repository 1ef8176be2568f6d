use buildiff_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{what}: expected {expected} elements, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite values in {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("non-finite activations in layer `{0}`")]
    NonFiniteLayer(String),
    #[error("stage `{required}` must be trained first: {path} not found")]
    MissingStage { required: &'static str, path: String },
    #[error("{0}")]
    DataMismatch(String),
    #[error("another training run holds {0}")]
    Locked(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
