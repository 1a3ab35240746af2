use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model violation: {0}")]
    Model(String),
    #[error("t = {t} is outside the model domain [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty sample")]
    EmptySample,
    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },
    #[error("fixed point did not converge at step {step} after {iterations} iterations")]
    FixedPoint { step: usize, iterations: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
