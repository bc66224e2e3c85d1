use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the library.
///
/// The variants double as failure categories for the command-line tool:
/// [`Error::category`] maps each one onto config / data / run failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Config,
    Data,
    Run,
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::UnsupportedVariant(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Schema(_) => {
                ErrorCategory::Data
            }
            Error::Usage(_) => ErrorCategory::Usage,
            Error::Shape(_)
            | Error::Index(_)
            | Error::Contract(_)
            | Error::NonFinite(_)
            | Error::Run(_) => ErrorCategory::Run,
        }
    }
}
