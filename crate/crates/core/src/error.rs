use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, D2Error>;

#[derive(Debug, Error)]
pub enum D2Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("checksum mismatch in entry {0:?}")]
    ChecksumMismatch(String),

    #[error("truncated file")]
    TruncatedFile,

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing weights for layer {0:?}")]
    MissingWeights(String),

    #[error("image too small: {height}x{width} (need at least {min}x{min})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("degenerate feature map: soft-score mass {0:e} is below 1e-12")]
    DegenerateMap(f64),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("point maps to infinity (|w| = {0:e})")]
    PointAtInfinity(f64),

    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    #[error("cell ({0}, {1}) is out of bounds")]
    OutOfBounds(usize, usize),

    #[error("no negative candidates outside the K = {0} neighbourhood")]
    NoNegativeCandidates(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Coarse error classes used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Format,
    Shape,
}

impl D2Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            D2Error::Io(_) => ErrorClass::Io,
            D2Error::BadMagic { .. }
            | D2Error::VersionUnsupported(_)
            | D2Error::ChecksumMismatch(_)
            | D2Error::TruncatedFile
            | D2Error::Format(_)
            | D2Error::InvalidArgument(_) => ErrorClass::Format,
            _ => ErrorClass::Shape,
        }
    }
}
