use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot upsample along {axis} axis: it has a single sample")]
    DegenerateAxis { axis: &'static str },

    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),

    #[error("training volumes have zero variance after clipping")]
    ZeroVariance,

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported container version {found} in {path}")]
    UnsupportedVersion { path: PathBuf, found: u64 },

    #[error("shape mismatch in {path}: header declares {expected} values, payload holds {found}")]
    ShapeMismatch { path: PathBuf, expected: usize, found: usize },

    #[error("mask does not match volume: {0}")]
    MaskMismatch(String),

    #[error("mask is empty; cannot build target-only format")]
    EmptyMask,

    #[error("insufficient slices for noise extraction (need at least 2, got {0})")]
    InsufficientSlices(usize),

    #[error("no noise content extracted: every patch was rejected")]
    NoNoiseContent,

    #[error("{format}: {source}")]
    Format {
        format: String,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("training set must contain both classes")]
    SingleClass,

    #[error("class {label} has {count} members, fewer than k = {k}")]
    TooFewInClass { label: u8, count: usize, k: usize },

    #[error("roc curves cover different patients")]
    UnpairedRoc,

    #[error("missing {format} data for patient {patient}")]
    MissingFormat { patient: String, format: String },

    #[error("phantom geometry does not fit: {0}")]
    Geometry(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Tags an error with the input format it arose in.
    pub fn in_format(self, format: impl ToString) -> Self {
        Error::Format { format: format.to_string(), source: Box::new(self) }
    }
}
