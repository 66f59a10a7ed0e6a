use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("MissingTensor({0:?})")]
    MissingTensor(String),
    #[error("ShapeMismatch: {name} expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("ImageTooSmall: {height}x{width}, need at least {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("ChannelMismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),
    #[error("FASpecMismatch: feature aggregation is disabled for this model")]
    FaSpecMismatch,
    #[error("UntrainedModel: no checkpoint loaded and untrained use was not allowed")]
    UntrainedModel,
    #[error("CheckpointMismatch: checkpoint was trained for {found}, requested {requested}")]
    CheckpointMismatch { found: String, requested: String },
    #[error("EmptyDataset: no decodable images in {0}")]
    EmptyDataset(PathBuf),
    #[error("EmptyInput: {0}")]
    EmptyInput(&'static str),
    #[error("NonFiniteLoss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(name: &str, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
