use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("wav format error ({field}): {detail}")]
    Format { field: &'static str, detail: String },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("clip too short: {required} masked positions required but only {available} patches")]
    ClipTooShort { required: usize, available: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("empty pool: total hours is zero")]
    EmptyPool,
    #[error("downsampling not supported: cannot resample N={from} to N={to}")]
    DownsampleNotSupported { from: usize, to: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("incompatible file: {0}")]
    Incompatible(String),
    #[error("corrupted file: {0}")]
    Corrupt(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training failed at step {step}: {source}")]
    Step { step: u64, source: Box<Error> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes; the CLI maps these onto exit codes 2, 3 and 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Dimension(_)
            | Error::Index(_)
            | Error::Capacity(_)
            | Error::DownsampleNotSupported { .. }
            | Error::EmptyPool
            | Error::Json(_) => ErrorClass::Config,
            Error::Format { .. }
            | Error::ClipTooShort { .. }
            | Error::InsufficientData(_)
            | Error::Data(_)
            | Error::EmptyInput(_)
            | Error::Incompatible(_)
            | Error::Corrupt(_)
            | Error::Io { .. } => ErrorClass::Data,
            Error::Contract(_) => ErrorClass::Internal,
            Error::Step { source, .. } => source.class(),
        }
    }
}
