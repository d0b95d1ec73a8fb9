use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ControlPointCount: {0}")]
    ControlPointCount(String),
    #[error("control value {value} at index {index} is outside [-1, 1]")]
    ControlValueOutOfRange { index: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("UnknownShape: {0}")]
    UnknownShape(String),
    #[error("OutOfWorkspace: {0}")]
    OutOfWorkspace(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stale cache: network changed since the forward pass")]
    StaleCache,
    #[error("Diverged: {0}")]
    Diverged(String),
    #[error("grid mismatch between interaction profiles")]
    GridMismatch,
    #[error("NoConvergenceMode: no positive-to-negative rotation pattern in the pseudo profile")]
    NoConvergenceMode,
    #[error("GuidanceNaN: non-finite guidance gradient at step {step} (k = {k})")]
    GuidanceNaN { step: usize, k: usize },
    #[error("parse error at position {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
