//! Shared error type for the crate.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor/array shapes do not line up; message names both shapes.
    Dimension(String),
    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    Contract(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Invalid input data (out-of-range labels, missing maps, ...).
    Input(String),
    /// Malformed file contents; message carries location info.
    Parse(String),
    /// Training aborted (non-finite loss and similar).
    Train(String),
    /// I/O failure with context.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Error {
        Error::Io(format!("{}: {}", path.display(), e))
    }
}
