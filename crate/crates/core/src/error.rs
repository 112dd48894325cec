use std::fmt;

/// Crate-wide error type. `Validation` covers bad arguments, malformed
/// configs and contract violations; `Runtime` covers I/O and failures that
/// occur after inputs were accepted. The split maps onto the CLI's exit
/// codes (1 validation, 2 runtime).
#[derive(Debug)]
pub enum Error {
    Validation(String),
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Runtime(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Runtime(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
