//! Crate-wide error type.

use std::fmt;

/// Errors produced by any part of the engine.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An API contract was violated (bad argument, wrong call order).
    Contract(String),
    /// Invalid model or run configuration.
    Config(String),
    /// Malformed or inconsistent input data.
    Data(String),
    /// File or payload could not be parsed.
    Parse(String),
    /// Operation not supported in the current state (e.g. merging a quantized base).
    Unsupported(String),
    /// A component was used in a state it does not allow.
    State(String),
    /// Numerical failure (NaN/Inf where finite values are required).
    Numeric(String),
    /// Evaluation coverage failure: predictions missing for example ids.
    Coverage(Vec<String>),
    /// Memory ledger went negative or otherwise inconsistent.
    Accounting(String),
    /// CLI / report usage error.
    Usage(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "invalid configuration: {m}"),
            Error::Data(m) => write!(f, "bad data: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported: {m}"),
            Error::State(m) => write!(f, "invalid state: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Coverage(ids) => write!(f, "missing predictions for ids: {ids:?}"),
            Error::Accounting(m) => write!(f, "memory accounting error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
