//! Crate-wide error type with CLI exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("mesh has no valid faces")]
    EmptyMesh,
    #[error("degenerate face {face}: area {area:.3e} below threshold")]
    DegenerateFace { face: usize, area: f64 },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("feature spec selects no features")]
    InvalidFeatureSpec,
    #[error("k = {k} exceeds reference set size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("class histogram is all zero")]
    AllZeroHistogram,
    #[error("feature spec mismatch: checkpoint {expected}, input {actual}")]
    FeatureSpecMismatch { expected: String, actual: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code contract: 0 ok, 2 parse, 3 empty/invalid data, 4 spec
    /// mismatch, 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::UnsupportedFormat(_) | Error::Io(_) => 2,
            Error::EmptyMesh
            | Error::DegenerateFace { .. }
            | Error::OutOfRange(_)
            | Error::InvalidFeatureSpec
            | Error::KTooLarge { .. }
            | Error::IndexOutOfRange { .. }
            | Error::InvalidLabel { .. }
            | Error::LengthMismatch { .. }
            | Error::AllZeroHistogram
            | Error::InvalidConfig(_)
            | Error::BadCheckpoint(_) => 3,
            Error::FeatureSpecMismatch { .. } => 4,
            Error::ShapeMismatch { .. } | Error::NonFinite(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
