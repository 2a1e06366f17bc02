use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("invalid depth {0}; depth must be positive")]
    InvalidDepth(f64),

    #[error("invalid time interval {0}; interval must be positive")]
    InvalidInterval(f64),

    #[error("need at least 2 frames, got {0}")]
    InsufficientFrames(usize),

    #[error("timestamps must be strictly increasing (violated at index {0})")]
    Ordering(usize),

    #[error("invalid temporal bin count {0}; need at least 2")]
    InvalidBins(usize),

    #[error("image of {width}x{height} is too small; need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("time {t} is outside the keyframe range [{start}, {end}]")]
    Extrapolation { t: f64, start: f64, end: f64 },

    #[error("render output carries no contributor records")]
    MissingRecords,

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
