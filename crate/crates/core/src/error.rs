use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlapError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unsupported audio format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("tagging failed for record {id}: {detail}")]
    Tagging { id: String, detail: String },

    #[error("generation endpoint failed after {attempts} attempt(s): {detail}")]
    Endpoint { attempts: u32, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlapError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        FlapError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlapError::Io {
            path: path.into(),
            source,
        }
    }
}
