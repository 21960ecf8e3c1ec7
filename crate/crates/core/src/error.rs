use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical operation failed (non-finite value, failed factorization, ...).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Dataset contents violate an invariant (bad mask values, split overlap, ...).
    #[error("dataset error: {0}")]
    Data(String),

    /// A file did not match the expected on-disk format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category label, used for CLI error reporting and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Data(_) => "data",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code associated with the category (0 is success, 1 is reserved).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Io { .. } => 4,
            Error::Format { .. } => 5,
            Error::Shape(_) => 6,
            Error::Numeric(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
