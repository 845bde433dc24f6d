use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown degradation `{0}`")]
    UnknownDegradation(String),

    #[error("unknown tool `{tool}` for degradation `{degradation}`")]
    UnknownTool { tool: String, degradation: String },

    #[error("image `{0}` not found")]
    ImageNotFound(String),

    #[error("non-finite score for metric `{0}`")]
    InvalidMetric(String),

    #[error("metric set mismatch: {0}")]
    MetricSetMismatch(String),

    #[error("candidate set mismatch: {0}")]
    CandidateSetMismatch(String),

    #[error("at least two candidates are required, got {0}")]
    NotEnoughCandidates(usize),

    #[error("tie intensity must be non-negative, got {0}")]
    InvalidTieIntensity(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionError { expected: usize, actual: usize },

    #[error("degenerate comparison data: {0}")]
    DegenerateData(String),

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("oracle protocol error: {0}")]
    OracleProtocol(String),

    #[error("configuration error: {0}")]
    ConfigError(String),

    #[error("rankings share fewer than two candidates")]
    InsufficientOverlap,

    #[error("profile {0} has no cached trajectory ranks")]
    ProfileNotStabilizable(u64),

    #[error("too many degradations: {count} exceeds the cap of {cap}")]
    TooLarge { count: usize, cap: usize },

    #[error("invalid world spec: {0}")]
    SpecError(String),

    #[error("unsupported schema version {found} in {path} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("parse error in {path}: {message}")]
    ParseError { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::ParseError {
            path: path.into(),
            message: format!("line {}, column {}: {}", err.line(), err.column(), err),
        }
    }
}
