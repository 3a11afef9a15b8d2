use thiserror::Error;

/// Errors raised by the simulation, estimation and verification layers.
#[derive(Debug, Error)]
pub enum IsmpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite drift at t={t}, x={x}, a={a:?}")]
    NonFiniteDrift { t: f64, x: f64, a: Vec<f64> },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("mollifier quadrature produced a non-finite value at t={t}, x={x}")]
    QuadratureFailure { t: f64, x: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("missing derivative callback: {0}")]
    MissingDerivative(String),

    #[error("local-time engine is not calibrated; run calibrate_reversal_signs first")]
    Uncalibrated,

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("regression failure at step {step}: {reason} (condition number {condition:e})")]
    Regression {
        step: usize,
        reason: String,
        condition: f64,
    },

    #[error("optimizer diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IsmpError>;
