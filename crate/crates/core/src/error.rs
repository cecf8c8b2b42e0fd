use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: {message}")]
    Load {
        file: String,
        line: usize,
        message: String,
    },
    #[error("feature alignment failed: {0}")]
    Alignment(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("degenerate study set: {0}")]
    DegenerateSet(String),
    #[error("outcome type mismatch: {0}")]
    OutcomeType(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no convergence after {iterations} iterations (last change {})", trace.last().copied().unwrap_or(f64::NAN))]
    Convergence { iterations: usize, trace: Vec<f64> },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("data are perfectly separable: {0}")]
    Separable(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("unsupported operation: {0}")]
    Capability(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("threshold error: {0}")]
    Threshold(String),
    #[error("degenerate fiber for projected partition {0}")]
    DegenerateFiber(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training on {train}, validating on {validate}: {source}")]
    Cell {
        train: String,
        validate: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Config,
            Error::Convergence { .. }
            | Error::Singular(_)
            | Error::Separable(_)
            | Error::Numerical(_)
            | Error::DegenerateFiber(_) => ErrorClass::Numerical,
            Error::Cell { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn in_cell(self, train: &str, validate: &str) -> Error {
        Error::Cell {
            train: train.to_string(),
            validate: validate.to_string(),
            source: Box::new(self),
        }
    }
}
