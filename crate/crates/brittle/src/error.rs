use std::path::Path;

use thiserror::Error;

/// Command failures. Configuration problems exit with status 2, everything
/// else with status 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl std::fmt::Display) -> Self {
        Error::Format {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        Error::Runtime(e.to_string())
    }
}
