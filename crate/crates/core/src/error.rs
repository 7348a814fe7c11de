use thiserror::Error;

/// Errors raised by the imaging and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} outside the diffusion horizon [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("ODE solver exhausted {max_steps} steps at t = {t}")]
    SolverExhausted { max_steps: usize, t: f64 },

    #[error("ODE solver step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("missing baseline between stations {0} and {1}")]
    MissingBaseline(usize, usize),

    #[error("too few stations: need {needed}, have {have}")]
    TooFewStations { needed: usize, have: usize },

    #[error("degenerate mixture fit: {0}")]
    DegenerateFit(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
