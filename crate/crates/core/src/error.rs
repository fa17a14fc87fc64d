use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a binary PPM frame.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("bad magic: expected \"P6\", found {0:?}")]
    BadMagic(String),
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("short pixel data: need {needed} bytes, found {found}")]
    ShortData { needed: usize, found: usize },
}

/// Failures while reading a model checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: not an OOBN checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint inconsistent with its config: {0}")]
    Inconsistent(String),
}

/// Failures while parsing a frame annotation file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("row {row}: label {label:?} is not 0 or 1")]
    NonBinary { row: usize, label: String },
    #[error("frame index {0} annotated more than once")]
    DuplicateIndex(usize),
    #[error("expected {expected} annotated frames, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("frame index {index} out of range for {expected} frames")]
    IndexOutOfRange { index: usize, expected: usize },
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no cached forward state for {0}")]
    MissingCache(&'static str),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("both classes are required: {0}")]
    SingleClass(&'static str),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("ppm: {0}")]
    Ppm(#[from] PpmError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("annotations: {0}")]
    Annotation(#[from] AnnotationError),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// I/O failure tagged with the path involved.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (NaN/Inf during training or
    /// inference) as opposed to bad input data or arguments.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
