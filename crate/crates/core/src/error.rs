use thiserror::Error;

/// Errors raised by the workbench.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PflError {
    #[error("shape mismatch in {block}: expected {expected}, found {found}")]
    ShapeMismatch {
        block: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    Overflow(String),

    #[error("sample index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("strong convexity constant is zero; supply a positive mu floor (e.g. 1e-2)")]
    ZeroStrongConvexity,

    #[error("{what} did not converge after {iterations} iterations (last estimate {last})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last: f64,
    },

    #[error("ground truth is not available for this dataset")]
    MissingTruth,

    #[error("csv error at row {row}, column `{column}`: {reason}")]
    Csv {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("mismatched iteration grids: {0}")]
    GridMismatch(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, PflError>;

impl From<std::io::Error> for PflError {
    fn from(e: std::io::Error) -> Self {
        PflError::Io(e.to_string())
    }
}
