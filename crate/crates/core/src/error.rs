use thiserror::Error;

/// Errors produced anywhere in the simulation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("integration diverged at t = {time:.4} s")]
    IntegrationDiverged { time: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    SolverFailed { iterations: usize, residual: f64 },

    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("insufficient horizon: need {needed} samples, have {available}")]
    InsufficientHorizon { needed: usize, available: usize },

    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),

    #[error("no state has been received yet (cold start)")]
    ColdStart,

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("plant diverged at loop {loop_index}")]
    PlantDiverged { loop_index: usize },

    #[error("normalization undefined: observed signal has zero range")]
    ZeroRange,

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Serialization(_) | Error::Io(_) | Error::Dimension { .. } => 2,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
