//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension contract violated by a kernel or attention call.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: input contains non-finite values")]
    NonFinite { op: &'static str },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Timestep outside the range an operation is defined on.
    #[error("invalid timestep in {op}: {detail}")]
    Timestep { op: &'static str, detail: String },

    /// Layer mask-policy dispatch violated (wrong policy or empty cache).
    #[error("mask policy violation: {0}")]
    MaskPolicy(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Detector endpoint unreachable or timed out after all retries.
    #[error("detector transport failure: {0}")]
    Transport(String),

    /// Detector answered, but the body does not follow the answer format.
    #[error("detector protocol violation: {0}")]
    Protocol(String),

    /// A generation aborted mid-loop; the audit collected so far is attached.
    #[error("generation aborted: {source}")]
    Aborted {
        source: Box<Error>,
        audit: Box<crate::pipeline::GenerationAudit>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn timestep(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Timestep {
            op,
            detail: detail.into(),
        }
    }
}
