//! Error type shared by every module.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument (shape, range, count) does not hold.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A file did not match its expected layout.
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
