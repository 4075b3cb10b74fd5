//! Error type shared by the whole numeric core.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes do not admit the requested operation.
    Shape(String),
    /// A configuration is internally inconsistent (bad dims, infeasible grid).
    Config(String),
    /// Invalid runtime input (out-of-range label, empty split, ...).
    Input(String),
    /// Numeric failure (non-finite values, zero variance in CKA).
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
