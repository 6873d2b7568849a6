use std::path::PathBuf;

use cdr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CdrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty fragment: {0}")]
    EmptyFragment(String),
    #[error("empty mesh")]
    EmptyMesh,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl CdrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdrError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a bug.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            CdrError::Data(_) | CdrError::Io { .. } | CdrError::Image { .. } | CdrError::Config(_) | CdrError::EmptyMesh
        )
    }
}

pub type Result<T> = std::result::Result<T, CdrError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CdrError::InvalidArgument(msg.into()))
}
