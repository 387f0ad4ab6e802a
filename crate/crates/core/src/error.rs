use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("metadata error in {path}: {detail}")]
    Metadata { path: PathBuf, detail: String },

    #[error("checksum mismatch for {path}: sidecar {expected}, payload {actual}")]
    Checksum { path: PathBuf, expected: String, actual: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing upstream stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
