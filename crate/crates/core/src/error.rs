use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("ingestion error for sample `{sample}`: {message}")]
    Ingestion { sample: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Validation(_)
                | Error::Precondition(_)
                | Error::Ingestion { .. }
                | Error::Json { .. }
        )
    }
}
