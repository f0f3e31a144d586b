use std::fmt;

/// Errors surfaced by every layer of the runtime.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller broke an API precondition (double release, resume of a
    /// consumed token, returning a stream that is not held, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("address space overflow: {0}")]
    Overflow(String),
    #[error("unknown {kind} {id}")]
    Unknown { kind: &'static str, id: u64 },
    #[error("config error ({location}): {message}")]
    Config { location: String, message: String },
    #[error("malformed log line {line}: {message}")]
    MalformedLog { line: usize, message: String },
    /// The engine ran out of events while tasks were still alive.
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("runtime assertion failed: {0}")]
    Assertion(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }

    pub fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
