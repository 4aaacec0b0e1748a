use std::path::PathBuf;

/// Errors produced by the purification pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate schedule coefficient at t={t}: alpha_bar={alpha_bar:e}")]
    Degenerate { t: usize, alpha_bar: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("schedule fingerprint mismatch: model {model}, schedule {schedule}")]
    FingerprintMismatch { model: String, schedule: String },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidSchedule(_)
            | Error::InvalidArgument(_)
            | Error::StepOutOfRange { .. } => ErrorClass::Config,
            Error::Data(_)
            | Error::MissingFile(_)
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Json(_)
            | Error::FormatVersion { .. }
            | Error::FingerprintMismatch { .. } => ErrorClass::Data,
            Error::Tensor(_)
            | Error::ShapeMismatch { .. }
            | Error::Degenerate { .. }
            | Error::NonFinite(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
