use std::path::PathBuf;

/// Errors produced across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("geometry: cannot build an acceleration structure over an empty scene")]
    EmptyScene,

    #[error("geometry: invalid primitive {index}: {reason}")]
    InvalidPrimitive { index: usize, reason: String },

    #[error(
        "scene: could not place instance {placed} of {target} for class '{class}' \
         within the retry budget"
    )]
    InfeasiblePlacement {
        class: String,
        placed: usize,
        target: usize,
    },

    #[error("schema: {0}")]
    Schema(String),

    #[error("labelmap: raw label id {0} has no mapping")]
    UnmappedLabel(u32),

    #[error("csc: prototype for class {0} is not initialized")]
    UninitializedPrototype(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format: {0}")]
    Format(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse: {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
