use thiserror::Error;

/// Errors raised by the forecasting, attack and detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("region selects no grid cell")]
    EmptyRegion,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("numerical blow-up: {0}")]
    NumericalBlowup(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bad sampling interval [{a}, {b})")]
    BadInterval { a: f64, b: f64 },
    #[error("noise levels must decrease: sigma_next = {next} >= sigma = {cur}")]
    BadNoiseOrder { cur: f64, next: f64 },
    #[error("bad approximation step count {n} (allowed 1..={max})")]
    BadStepCount { n: usize, max: usize },
    #[error("tape does not match: {0}")]
    TapeMismatch(String),
    #[error("unknown attack variant `{0}`")]
    UnknownVariant(String),
    #[error("induced deviation never reaches the threshold {threshold}")]
    NoCrossing { threshold: f64 },
    #[error("degenerate sample of size {0}")]
    DegenerateSample(usize),
    #[error("no qualifying event: {0}")]
    NoEventFound(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
