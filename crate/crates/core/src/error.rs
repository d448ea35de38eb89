use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },

    #[error("{field} truncated at offset {offset}")]
    Truncated { field: &'static str, offset: u64 },

    #[error("non-finite value in {field} at offset {offset}")]
    NonFinite { field: &'static str, offset: u64 },

    #[error("invalid header field {field}: {reason}")]
    InvalidHeader { field: &'static str, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("gradients required but not present")]
    MissingGradients,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("codec mismatch: {0}")]
    CodecMismatch(String),
}

/// Coarse error classes, stable across releases. The CLI maps each to its
/// own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    Io,
    Format,
    Shape,
    MissingGradients,
    Config,
    Codec,
    Domain,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::NonFinite { .. }
            | Error::InvalidHeader { .. } => ErrorClass::Format,
            Error::Shape(_) => ErrorClass::Shape,
            Error::MissingGradients => ErrorClass::MissingGradients,
            Error::InvalidSpec(_) | Error::InvalidConfig(_) => ErrorClass::Config,
            Error::CodecMismatch(_) => ErrorClass::Codec,
            Error::Degenerate(_) | Error::Domain(_) => ErrorClass::Domain,
        }
    }
}
