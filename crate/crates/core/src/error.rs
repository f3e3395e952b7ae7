use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] jn_autodiff::AutodiffError),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("label assignment: {0}")]
    Labels(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("training diverged at epoch {epoch} step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user-supplied configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
