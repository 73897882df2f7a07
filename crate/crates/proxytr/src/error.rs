//! Error types shared across the crate.

use std::fmt;

/// Errors emitted by tensor, geometry, data generation, and training code.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An argument is outside the operation's domain (bad count, empty cloud, ...).
    Domain(String),
    /// The input is structurally valid but geometrically degenerate
    /// (all points identical, nothing visible from the camera, ...).
    DegenerateInput(String),
    /// The caller violated an API contract (non-scalar backward, malformed mask, ...).
    Usage(String),
    /// A text format could not be parsed.
    Parse { line: usize, message: String },
    /// A checkpoint container is invalid or incompatible.
    Checkpoint(String),
    /// A run configuration is invalid.
    Config(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
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

pub type Result<T> = std::result::Result<T, Error>;
