use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid labels: {0}")]
    Label(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("numeric abort: non-finite value in {task}")]
    NumericAbort { task: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is a numeric abort (NaN/Inf during training).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericAbort { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }

    /// Whether the failure originates from reading or writing data files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Io { .. } | Error::Json { .. } | Error::Label(_)
        )
    }
}
