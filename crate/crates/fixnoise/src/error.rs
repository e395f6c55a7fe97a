//! Error type shared across the crate.
//!
//! Variants map onto the CLI exit-code contract: `Dim`/`Contract`/`Config`
//! are caller mistakes (exit 2), `Numeric` is a numerical failure (exit 3),
//! `Io`/`Format` are file problems (exit 4).

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Dim(String),
    /// Violated precondition (empty batch, non-scalar loss, degenerate input).
    Contract(String),
    /// Incompatible or invalid configuration (anchor seed mismatch, bad mode).
    Config(String),
    /// File format problem (bad magic, version, corrupted payload).
    Format(String),
    /// Numerical failure (NaN loss, eigensolver non-convergence).
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Contract(_) | Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) | Error::Io(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

macro_rules! err_dim {
    ($($arg:tt)*) => { $crate::error::Error::Dim(format!($($arg)*)) };
}
macro_rules! err_contract {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
macro_rules! err_config {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! err_format {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
macro_rules! err_numeric {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(format!($($arg)*)) };
}

