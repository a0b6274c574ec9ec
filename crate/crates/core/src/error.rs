use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("at least one camera is required")]
    NoCameras,

    #[error("volume level mismatch: expected {expected}, got {actual}")]
    LevelMismatch { expected: u8, actual: u8 },

    #[error("cannot upsample level {0}: already the finest level")]
    FinestLevel(u8),

    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image dimensions {width}x{height} are not divisible by {stride}")]
    NotDivisible { width: usize, height: usize, stride: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("depth and error maps have different support")]
    SupportMismatch,

    #[error("requested {requested} points but only {available} pixels have valid depth")]
    TooManyPoints { requested: usize, available: usize },

    #[error("all views are invisible")]
    NoVisibleViews,

    #[error("empty fragment")]
    EmptyFragment,

    #[error("empty sequence")]
    EmptySequence,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("predicted probability {0} is not strictly inside (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("frame {frame}: {message}")]
    Frame { frame: usize, message: String },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from user input (files, parameters) rather
    /// than an internal inconsistency.
    pub fn is_input(&self) -> bool {
        !matches!(
            self,
            Error::LevelMismatch { .. }
                | Error::FinestLevel(_)
                | Error::ChannelMismatch { .. }
                | Error::Shape(_)
                | Error::NoVisibleViews
                | Error::ProbabilityOutOfRange(_)
        )
    }
}
