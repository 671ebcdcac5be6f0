use thiserror::Error;

/// Errors raised anywhere in the library. Each variant maps to one error
/// class with its own process exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("inheritance error at slot `{slot}`: {reason}")]
    Inheritance { slot: String, reason: String },

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dimension(_) | Error::Index(_) => 3,
            Error::Inheritance { .. } => 4,
            Error::Training { .. } => 5,
            Error::Io(_) | Error::Format(_) => 6,
            Error::Contract(_) => 7,
            Error::Internal(_) => 8,
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
