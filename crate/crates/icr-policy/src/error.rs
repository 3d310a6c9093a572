use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data (dataset, annotation or record files).
    #[error("data error: {0}")]
    Data(String),

    /// Scene-string parse failure; `offset` is the token index in the string.
    #[error("scene parse error at token {offset}: {message}")]
    SceneParse { offset: usize, message: String },

    /// Invalid configuration (model variant contracts, flag conflicts, CLI specs).
    #[error("config error: {0}")]
    Config(String),

    /// Metric preconditions violated (e.g. average precision without positives).
    #[error("metric error: {0}")]
    Metric(String),

    /// Model construction or inference failure.
    #[error("model error: {0}")]
    Model(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 1 = validation, 2 = data, 3 = runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Data(_) | Error::SceneParse { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
