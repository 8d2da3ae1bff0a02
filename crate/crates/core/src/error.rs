use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("non-finite value encountered at t = {time}")]
    NonFinite { time: f64 },
    #[error("blow-up: H1 norm {norm:.3e} exceeded guard {guard:.1e} at t = {time}")]
    BlowUp { time: f64, norm: f64, guard: f64 },
    #[error("noise realization mismatch: {0}")]
    NoiseMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed data: {0}")]
    Format(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
