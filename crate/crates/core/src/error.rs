//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by tensor operations, loss assembly, configuration and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A hyperparameter or configuration value is out of its valid range.
    #[error("config error: {0}")]
    Config(String),
    /// An index falls outside the tensor or feature map it addresses.
    #[error("index error: {0}")]
    Index(String),
    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// A serialized artifact (checkpoint, image, manifest) is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user input (config, data files) rather than
    /// failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, dim_err, format_err};
