//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Render buffers were produced from a map state that has since mutated.
    #[error("stale snapshot: buffers from map version {buffers}, map is at {map}")]
    StaleSnapshot { buffers: u64, map: u64 },

    #[error("tracking lost: {inliers} inliers at finest level, minimum is {min}")]
    TrackingLost { inliers: usize, min: usize },

    #[error("load error: {0}")]
    Load(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
