use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Recorded graph state is inconsistent (replay or seed mismatch).
    #[error("graph error: {0}")]
    Graph(String),

    /// Checkpoint file is malformed or inconsistent with its config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset manifest is malformed or references missing files.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Training aborted because the loss left the finite range.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    // Wrapped causes are printed by the error chain (they are `#[source]`s
    // via `#[from]`), so the labels stay bare to avoid duplicated text.
    #[error("io error")]
    Io(#[from] std::io::Error),

    #[error("png decode error")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error")]
    PngEncode(#[from] png::EncodingError),

    #[error("json error")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
