use thiserror::Error;

use crate::kernelfit::FitReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("input too short: {0}")]
    InputSize(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("matrix not positive definite after jitter {jitter:e} (size {size})")]
    Conditioning { size: usize, jitter: f64 },

    /// The kernel fit produced a non-finite objective. The best iterate seen
    /// before the failure is carried along so callers can still inspect it.
    #[error("kernel fit failed: {reason}")]
    FitFailure {
        reason: String,
        best: Option<Box<FitReport>>,
    },

    #[error("optimization failed: {reason} (best objective {best_value})")]
    Optimization {
        reason: String,
        best_value: f64,
        best_params: Vec<f64>,
    },

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("sample rate mismatch: {0}")]
    SampleRateMismatch(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::ParameterDomain(msg.into())
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}
