use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Compute,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}:{line}: duplicate record for sensor {sensor_id} at {timestamp}")]
    Conflict {
        path: PathBuf,
        line: u64,
        sensor_id: String,
        timestamp: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate value range: log-domain min {vmin} equals max {vmax}")]
    DegenerateRange { vmin: f64, vmax: f64 },
    #[error("value {value} at index {index} is outside [0, 1]")]
    Domain { index: usize, value: f64 },
    #[error("corrupt image: diagonal entry {value} at index {index} is outside [-1, 1]")]
    CorruptImage { index: usize, value: f64 },
    #[error("model configuration: {0}")]
    ModelConfig(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("unknown sensor {0} and no feature vector supplied")]
    UnknownSensor(String),
    #[error("all {0} latent-search restarts failed")]
    AllRestartsFailed(usize),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
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
            Error::InvalidArgument(_) | Error::ModelConfig(_) | Error::ShapeMismatch { .. } => {
                ErrorKind::Config
            }
            Error::NonFinite(_) | Error::AllRestartsFailed(_) => ErrorKind::Compute,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
