use thiserror::Error;

/// Coarse failure class, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Io,
    DataValidation,
    TrainingDivergence,
    FairnessViolation,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Io => "io",
            ErrorCategory::DataValidation => "data-validation",
            ErrorCategory::TrainingDivergence => "training-divergence",
            ErrorCategory::FairnessViolation => "fairness-violation",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::DataValidation => 4,
            ErrorCategory::TrainingDivergence => 5,
            ErrorCategory::FairnessViolation => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid data: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("leakage probe inconclusive: {0}")]
    Inconclusive(String),
    #[error("training diverged at epoch {epoch}: non-finite loss {loss}")]
    Divergence { epoch: usize, loss: f64, diagnostic: String },
    #[error("fairness violation: {0}")]
    Fairness(String),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Config(_) => ErrorCategory::Usage,
            Error::Divergence { .. } => ErrorCategory::TrainingDivergence,
            Error::Fairness(_) => ErrorCategory::FairnessViolation,
            Error::Ingest { .. }
            | Error::EmptyInput(_)
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::UndefinedMetric(_)
            | Error::Inconclusive(_)
            | Error::Serialization(_) => ErrorCategory::DataValidation,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
