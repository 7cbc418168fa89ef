use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = YganError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum YganError {
    /// Invalid model, training, or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes or values that do not satisfy an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// A protocol precondition was violated (empty dataset, single-class evaluation, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A loss term or score became NaN or infinite.
    #[error("numeric failure: {term} = {value}")]
    NonFinite { term: String, value: f64 },

    #[error("ingestion error in {file}: {reason}")]
    Ingest { file: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl YganError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        YganError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            YganError::Config(_) | YganError::Input(_) | YganError::Protocol(_) => 2,
            YganError::Json(_) => 2,
            YganError::NonFinite { .. } => 3,
            YganError::Ingest { .. }
            | YganError::Checkpoint(_)
            | YganError::Io { .. }
            | YganError::Csv(_)
            | YganError::Image(_) => 4,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::YganError::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
