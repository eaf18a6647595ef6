use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the alignment and morphometry pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("failed to encode {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("matrix is singular")]
    Singular,
    #[error("eigen-solver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("insufficient matches: need {needed}, have {have}")]
    InsufficientMatches { needed: usize, have: usize },
    #[error("no consensus model with at least 4 inliers")]
    NoConsensus,
    #[error("keypoint too close to the image border")]
    NearBorder,
    #[error("descriptor kinds differ")]
    KindMismatch,
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
