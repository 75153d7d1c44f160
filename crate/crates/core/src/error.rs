use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("skeleton has no endpoints (closed loop)")]
    ClosedSkeleton,

    #[error("bone {bone} has zero length")]
    ZeroLengthBone { bone: usize },

    #[error("part scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput((usize, usize)),

    #[error("no visible vertices to sample texture from")]
    NoVisibleVertices,

    #[error("optimization diverged in stage `{stage}` at step {step}: total {total} > 10x initial {initial}")]
    Divergence {
        stage: String,
        step: usize,
        total: f64,
        initial: f64,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
