use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A vector, image or matrix had a size other than the expected one.
    DimensionMismatch { expected: usize, got: usize, what: &'static str },
    /// An argument violated a precondition (non-positive scale, empty set, ...).
    InvalidArgument(String),
    /// A matrix that must be positive definite failed its Cholesky factorization.
    NotPositiveDefinite(&'static str),
    /// A computation produced a non-finite value.
    NonFinite(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, got, what } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, got {got}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NotPositiveDefinite(what) => {
                write!(f, "matrix not positive definite: {what}")
            }
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for Error {}
