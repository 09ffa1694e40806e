use std::path::PathBuf;

use satdet_nn::NnError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("precision mismatch: {0}")]
    Precision(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad inputs rather than broken internals.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::Precision(_) => true,
            Error::Nn(e) => matches!(e, NnError::Format(_) | NnError::UnknownParam(_)),
            Error::Internal(_) => false,
        }
    }
}
