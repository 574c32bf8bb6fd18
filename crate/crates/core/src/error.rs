use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("instance has no labelled keypoints and cannot be evaluated")]
    UnevaluableInstance,

    #[error("prediction references unknown image id {0}")]
    UnknownImage(u64),

    #[error("dataset document is missing field `{0}`")]
    MissingField(String),

    #[error("annotation {id} has {len} keypoint values, expected {expected}")]
    KeypointLength { id: u64, len: usize, expected: usize },

    #[error("annotation {annotation} references missing image {image}")]
    DanglingImage { annotation: u64, image: u64 },

    #[error("degenerate bounding box {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("weights file version {found} is not supported (expected {expected})")]
    WeightsVersion { found: u32, expected: u32 },

    #[error("weights were saved for a different config (fingerprint mismatch)")]
    FingerprintMismatch,

    #[error("training diverged: loss is {loss} at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
