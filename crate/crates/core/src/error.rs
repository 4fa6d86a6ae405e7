use thiserror::Error;

use crate::policy::OptimError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// Serialized input could not be decoded; `field` is the offending path.
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },

    /// Input decoded but violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Network-level failure after the retry budget was spent.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    /// Non-retryable HTTP status; the response body is kept verbatim.
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },

    /// The remote side answered with a payload we cannot interpret.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Numeric(#[from] OptimError),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the remote endpoint rather than of the data.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            Error::Transport { .. } | Error::Http { .. } | Error::Protocol(_)
        )
    }
}
