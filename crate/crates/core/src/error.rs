use thiserror::Error;

#[derive(Debug, Error)]
pub enum LarrError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("arity mismatch: expected {expected} slices, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("cache miss for feature {index} `{text}`")]
    CacheMiss { index: usize, text: String },
    #[error("digest mismatch: {what} expected {expected}, found {found}")]
    DigestMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("missing upstream artifact {path}: run `{producer}` first")]
    MissingArtifact { path: String, producer: &'static str },
    #[error("undefined metric: {0}")]
    Undefined(&'static str),
    #[error(transparent)]
    Nn(#[from] larr_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LarrError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(LarrError::Invalid {
        op,
        msg: msg.into(),
    })
}
