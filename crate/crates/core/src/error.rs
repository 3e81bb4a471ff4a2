use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape error in {context}: {message}")]
    Shape { context: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape { context: context.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint { path: path.into(), message: message.into() }
    }

    /// Process exit code for the CLI: input-shaped errors exit 1,
    /// everything else is an internal error and exits 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. }
            | Error::Config(_)
            | Error::Input(_)
            | Error::Vocab(_)
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Checkpoint { .. } => 1,
            Error::Shape { .. } => 2,
        }
    }
}
