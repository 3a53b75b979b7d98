use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("singular or non-finite homography")]
    SingularHomography,

    #[error("empty database")]
    EmptyDatabase,

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite residual in block `{block}`")]
    NonFinite { block: String },

    #[error("missing candidate confidences for candidate {0}")]
    MissingConfidence(usize),

    #[error("empty mask")]
    EmptyMask,

    #[error("no valid ground-truth overlap")]
    NoValidOverlap,

    #[error("empty test set")]
    EmptyTestSet,

    #[error("train/test overlap: {0}")]
    Overlap(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
