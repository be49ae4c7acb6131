//! CLI error taxonomy: validation problems (bad config, bad arguments,
//! malformed inputs) exit with code 1, runtime failures with code 2.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// User-correctable input problem.
    Validation(String),
    /// Failure during execution (I/O, numerical breakdown).
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "{msg}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Core library errors surface as runtime failures unless they are argument
/// problems, which the CLI treats as validation.
impl From<rfusion_core::error::Error> for CliError {
    fn from(e: rfusion_core::error::Error) -> Self {
        match e {
            rfusion_core::error::Error::InvalidArgument(_)
            | rfusion_core::error::Error::DimensionMismatch { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
