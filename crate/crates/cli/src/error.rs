use std::fmt;

use noisy_lstm::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    /// A command that ran to the end but reports failure (gradcheck, sweep).
    Failed { code: i32, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed { code, .. } => *code,
            CliError::Run(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
                Error::NumericAbort(_)
                | Error::NonFinite { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteParamGradient(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Failed { message, .. } => write!(f, "{message}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(Error::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
