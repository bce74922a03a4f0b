use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Closed-form alpha preconditions (positive means, variances and covariance) violated.
    #[error("closed-form alpha undefined: {0}")]
    UndefinedClosedForm(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported format in {path}: {feature}")]
    FormatUnsupported { path: PathBuf, feature: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn unsupported(path: impl Into<PathBuf>, feature: impl Into<String>) -> Self {
        Error::FormatUnsupported {
            path: path.into(),
            feature: feature.into(),
        }
    }
}
