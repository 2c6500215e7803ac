use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing a binary PLY file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlyError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("property {name} has unsupported type {ty}")]
    PropertyType { name: String, ty: String },
    #[error("truncated payload: expected {expected} bytes of vertex data, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Ply(#[from] PlyError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate collapse: {0}")]
    Collapse(String),

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFinite(String),

    #[error("non-finite score in {branch} branch: {detail}")]
    ScoreData { branch: String, detail: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("body model: {0}")]
    Model(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Transport failures can be retried; everything else is final.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
