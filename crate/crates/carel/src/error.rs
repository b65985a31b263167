//! Crate-wide error type.
//!
//! The variants mirror the failure classes the public contracts promise:
//! shape problems report both shapes, parameter problems name the offending
//! value, and contract violations (tape reuse, stepping a finished episode)
//! are distinguishable from plain bad input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible or invalid tensor/term shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value outside its documented domain (negative temperature, bad id).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An API used against its stated contract (tape reuse, double masking).
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Unknown token or id outside the vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Checkpoint/config mismatch or unsupported format version.
    #[error("version error: {0}")]
    Version(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
