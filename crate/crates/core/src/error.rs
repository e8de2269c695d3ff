use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("{path}: line {line}: {message}")]
    DatasetLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid attention stack: {0}")]
    InvalidAttention(String),

    /// The attention map produced no usable region; callers fall back to whole-image crops.
    #[error("no salient region")]
    NoSalientRegion,

    #[error("render toolchain unavailable: {0}")]
    ToolchainMissing(String),

    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("backend does not expose attention weights")]
    AttentionUnavailable,

    #[error("model returned an empty generation")]
    EmptyGeneration,

    #[error("could not parse judge score from {0:?}")]
    JudgeParse(String),

    #[error("{0}")]
    Precondition(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
