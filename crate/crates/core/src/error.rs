use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {what} at byte {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: usize,
        detail: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("heatmap has no usable tissue pixels")]
    EmptyTissue,
    #[error("config error: {0}")]
    Config(String),
    #[error("label file: {0}")]
    Labels(String),
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
