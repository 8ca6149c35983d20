use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    // matrix invariants
    #[error("matrix has no rows or no columns ({rows}x{dim})")]
    EmptyMatrix { rows: usize, dim: usize },
    #[error("shape mismatch: {rows}x{dim} needs {expected} values, got {actual}")]
    ShapeMismatch {
        rows: usize,
        dim: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFiniteValue { row: usize, col: usize, value: f32 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    // file formats
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("malformed document: {0}")]
    Malformed(String),

    // manifests and text banks
    #[error("duplicate slide id {0:?}")]
    DuplicateSlideId(String),
    #[error("unknown split {0:?} (expected train, val or test)")]
    UnknownSplit(String),
    #[error("bad label {0:?}")]
    BadLabel(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("prototype index gap: index {0} missing")]
    IndexGap(usize),
    #[error("expected {expected} prototypes, found {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("class {label} has {available} slide(s), needs at least {required}")]
    TooFewSlides {
        label: usize,
        available: usize,
        required: usize,
    },

    // prototype initialization
    #[error("manifest has no training slides")]
    EmptyTrainSplit,
    #[error("slide {slide_id:?} has dim {actual}, expected {expected}")]
    DimMismatchAcrossSlides {
        slide_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("patch pool is empty")]
    EmptyPool,
    #[error("k-means needs at least {k} points, got {points}")]
    TooFewPoints { k: usize, points: usize },

    // aggregation
    #[error("slide {0:?} has no patches")]
    EmptySlide(String),
    #[error("prototype bank is not refined")]
    NotRefined,

    // probe
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    // metrics
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no class has support")]
    NoSupportedClasses,
    #[error("no runs to aggregate")]
    EmptyRuns,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::BadConfig(_) | Error::BadRatios(_) => ErrorKind::Usage,
            Error::NonFiniteValue { .. } | Error::NonFiniteGradient(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Malformed(e.to_string())
    }
}
