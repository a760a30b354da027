//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model assembly, file I/O and training.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    Shape(String),
    /// A value is outside the mathematical domain of an operation.
    Domain(String),
    /// Patch/volume geometry is inconsistent.
    Geometry(String),
    /// An operation was called in a mode it does not support.
    Mode(String),
    /// A binary file failed to parse; `offset` is the byte position.
    Parse { offset: usize, message: String },
    /// Invalid configuration value.
    Config(String),
    /// Training aborted (non-finite loss, empty dataset, ...).
    Train(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Geometry(m) => write!(f, "geometry error: {m}"),
            Error::Mode(m) => write!(f, "mode error: {m}"),
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
