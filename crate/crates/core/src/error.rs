use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate, grouped by the category the CLI maps to
/// an exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or architecture that cannot be realized.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or values outside the domain of a loss.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A split read that the active access audit forbids.
    #[error("access audit violation: {split} read at {path}")]
    Audit { split: String, path: PathBuf },

    /// Corpus files whose checksum disagrees with the manifest.
    #[error("corrupt corpus: {0}")]
    Corrupt(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 usage, 3 validation, 4 numerical,
    /// 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) | Error::Audit { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Io { .. } | Error::Corrupt(_) | Error::Format(_) => 5,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
