use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("series has no valid observations")]
    NoValidObservations,

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("value {value} outside of [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("no pixel passed the validity filter")]
    EmptyCorpus,

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { path: PathBuf, stored: u32, computed: u32 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("batch too small: {0} rows, need at least 2")]
    BatchTooSmall(usize),

    #[error("invalid permutation of length {0}")]
    InvalidPermutation(usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("region query does not intersect any stored tile")]
    NoCoverage,

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("degenerate variance in PCA input")]
    DegenerateVariance,

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("model has no training points")]
    EmptyModel,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("at least two clusters are required")]
    SingleCluster,

    #[error("clusters {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
