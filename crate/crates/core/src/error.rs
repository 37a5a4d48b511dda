use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent request.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (pixel ranges, image shapes, dataset layout).
    #[error("data error: {0}")]
    Data(String),

    /// A caller broke a shape or arity contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation was requested for a model variant that does not support it.
    #[error("variant error: {0}")]
    Variant(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
