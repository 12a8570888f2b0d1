//! Error taxonomy shared by every module.
//!
//! Four classes matter to callers: configuration problems (bad presets,
//! invalid run configs), usage errors (valid config, invalid call), numeric
//! failures at runtime (non-finite values), and on-disk format violations.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad preset, inconsistent dimensions, schema violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call that violates an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or other numeric breakdown at runtime.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary file that does not match its declared layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 for configuration/usage problems,
    /// 1 for anything that went wrong at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Json(_) => 2,
            Error::Numeric(_) | Error::Format { .. } | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
