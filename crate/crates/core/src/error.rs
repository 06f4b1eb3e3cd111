use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("pipeline-order error: {0}")]
    PipelineOrder(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted in phase {phase}: {reason}")]
    TrainingAborted { phase: String, reason: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage and configuration problems, as opposed to runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Checkpoint(_) | Error::Ingestion(_) | Error::Shape(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
