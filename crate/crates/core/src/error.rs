//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("timestamp {t} outside anchor range [{min}, {max}]")]
    TimeOutOfRange { t: f64, min: f64, max: f64 },

    #[error("anchor track is empty")]
    EmptyTrack,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("need at least 2 training views, got {0}")]
    InsufficientViews(usize),

    #[error("knn needs more than k={k} points, got {n}")]
    InsufficientPoints { k: usize, n: usize },

    #[error("primitive {id} has non-finite parameters")]
    InvalidPrimitive { id: u64 },

    #[error("frame was rendered without a retained contribution tape")]
    MissingTape,

    #[error("non-finite input: {0}")]
    InvalidInput(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    BadVersion {
        kind: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("trajectory {index} leaves the camera frustum at frame {frame}, view {view}")]
    FrustumViolation {
        index: usize,
        frame: usize,
        view: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("rectifier failed for view {view} at t={t}: {source}")]
    Rectify {
        view: String,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
