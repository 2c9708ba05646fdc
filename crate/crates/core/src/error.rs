use std::path::PathBuf;

use thiserror::Error;

use crate::diagnostics::Diagnostic;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("neural network '{nn}': {message}")]
    Nn { nn: String, message: String },

    /// Structural fault in a graph sample, located by JSON path.
    #[error("{message} at {path}")]
    Graph { path: String, message: String },

    #[error("{aggregation} aggregation over an empty neighborhood at {entity} node '{node}'")]
    EmptyNeighborhood {
        entity: String,
        node: String,
        aggregation: &'static str,
    },

    #[error("{0}")]
    Runtime(String),

    #[error("model has {} error diagnostic(s): {}", .0.len(), .0.first().map(|d| d.to_string()).unwrap_or_default())]
    InvalidModel(Vec<Diagnostic>),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("generator: {0}")]
    Generator(String),

    #[error("{file}: {source}")]
    Sample {
        file: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn nn(nn: &str, message: impl Into<String>) -> Self {
        Error::Nn {
            nn: nn.to_string(),
            message: message.into(),
        }
    }

    pub fn in_sample(self, file: impl Into<String>) -> Self {
        Error::Sample {
            file: file.into(),
            source: Box::new(self),
        }
    }
}
