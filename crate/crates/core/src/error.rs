use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is not above {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid ablation flags: {0}")]
    InvalidFlags(String),

    #[error("similarity adjustment input {0} outside [-1, 1]")]
    Domain(f64),

    #[error("derivative of the similarity map is singular at z={z} for t={t}")]
    SingularDerivative { z: f64, t: f64 },

    #[error("invalid shard plan: {0}")]
    InvalidPlan(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
