//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any forgelab module.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes for an operation. Carries the operation
    /// name and the offending shapes.
    Shape(String),
    /// An operation produced a NaN or infinity from finite inputs.
    NonFinite(String),
    /// A caller violated an API contract (non-scalar loss, eps <= 0, ...).
    Contract(String),
    /// A loss function returned different values for identical inputs.
    Determinism(String),
    /// Parameter count exceeds the dense-Hessian cap.
    Capacity { count: usize, cap: usize },
    /// Bad configuration value; names the offending key.
    Config(String),
    /// Malformed input file; carries byte offset or line number.
    Parse(String),
    /// Unknown layer/parameter identity.
    Lookup(String),
    /// Episode sampling could not satisfy the request; names the class.
    Sampling(String),
    /// Training loss became non-finite or exploded.
    Divergence {
        generation: u32,
        epoch: u32,
        batch: usize,
    },
    /// Checkpoint file rejected (version, checksum, truncation).
    Checkpoint(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite result: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Determinism(m) => write!(f, "determinism violation: {m}"),
            Error::Capacity { count, cap } => write!(
                f,
                "parameter count {count} exceeds dense-Hessian cap {cap}; \
                 compute the spectrum on a parameter subsample instead"
            ),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Lookup(m) => write!(f, "lookup error: {m}"),
            Error::Sampling(m) => write!(f, "sampling error: {m}"),
            Error::Divergence {
                generation,
                epoch,
                batch,
            } => write!(
                f,
                "training diverged at generation {generation}, epoch {epoch}, batch {batch}"
            ),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
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
