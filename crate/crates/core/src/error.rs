use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("integration failed{}: {msg}", sample.map(|s| format!(" for sample {s}")).unwrap_or_default())]
    Integration { sample: Option<usize>, msg: String },
    #[error("training aborted at iteration {iteration}: {msg}{}", checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Training {
        iteration: usize,
        msg: String,
        checkpoint: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Whether the failure is caused by bad input or configuration rather
    /// than by a computation going wrong.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Integration { .. } | Error::Training { .. } | Error::Tensor(TensorError::Numeric(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
