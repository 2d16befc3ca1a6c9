use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition (bad label, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed checkpoint or raster stream.
    #[error("format error at byte {offset}: {field}: {message}")]
    Format {
        field: String,
        offset: usize,
        message: String,
    },

    /// Inconsistent model / run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Unusable input data (empty dataset, zero-area image, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
