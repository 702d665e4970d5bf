use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {format} data: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("tracking failed: {0}")]
    Tracking(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(format: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: msg.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::InvalidArgument(_)
            | Error::Format { .. }
            | Error::Schema { .. }
            | Error::Io { .. } => 2,
            Error::Planning(_) => 3,
            Error::Tracking(_) => 4,
            Error::Diverged(_) => 5,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::Schema { .. } => "schema",
            Error::Io { .. } => "io",
            Error::Planning(_) => "planning",
            Error::Tracking(_) => "tracking",
            Error::Diverged(_) => "diverged",
        }
    }
}
