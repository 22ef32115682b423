use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` in stage `{stage}`")]
    NonFinite { stage: String, op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss is not a scalar on this tape")]
    OffTape,

    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
