use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown triplet category {id}; valid categories are 0..{count}")]
    UnknownCategory { id: usize, count: usize },

    #[error("{location}: {message}")]
    Validation { location: String, message: String },

    #[error("missing image {reference} referenced by {location}")]
    MissingImage { reference: String, location: String },

    #[error("checkpoint config fingerprint {found} does not match model fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path} at line {line}, column {column}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::UnknownCategory { .. }
                | Self::Validation { .. }
                | Self::MissingImage { .. }
                | Self::Json { .. }
                | Self::Fingerprint { .. }
        )
    }
}
