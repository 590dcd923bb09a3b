//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("schema error in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("degenerate clustering: {0}")]
    Degeneracy(String),

    #[error("loss {term} became non-finite at step {step}")]
    Diverged { term: String, step: usize },

    #[error("checkpoint config hash mismatch: {0}")]
    HashMismatch(String),
}

impl Error {
    /// Stable machine-parsable class token printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Image { .. } => "ImageError",
            Error::Schema { .. } => "SchemaError",
            Error::Config(_) => "ConfigError",
            Error::Shape(_) => "ShapeError",
            Error::State(_) => "StateError",
            Error::Degeneracy(_) => "DegeneracyError",
            Error::Diverged { .. } => "TrainDiverged",
            Error::HashMismatch(_) => "HashMismatch",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn schema(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), msg: msg.into() }
    }
}
