use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Schema violation in a scene or detection document. `field` is the JSON path.
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing prior layer: {0}")]
    MissingLayer(String),

    #[error("harmonization hook failed: {0}")]
    Hook(String),

    /// The cause is part of the message, not exposed as `source()`, so error
    /// chains print it once.
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("{path}: {cause}")]
    Image { path: PathBuf, cause: image::ImageError },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}
