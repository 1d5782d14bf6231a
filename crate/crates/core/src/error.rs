use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    #[error("layer {0} is not a convolution")]
    NotConvLayer(usize),

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid label map: {0}")]
    InvalidLabels(String),

    #[error("invalid segmentation parameters: {0}")]
    InvalidSegmentation(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("input is not classified as the flagged class (predicted {predicted}, flagged {flagged})")]
    NotFlagged { predicted: usize, flagged: usize },

    #[error("exhaustive search refused: {regions} regions exceeds the limit of {limit}")]
    TooManyRegions { regions: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus at {0}")]
    EmptyCorpus(PathBuf),

    #[error("image codec error on {path}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}")]
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
