use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point (t={t}, x={x:?}) outside field domain")]
    OutOfDomain { t: f64, x: Vec<f64> },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("sewing did not converge after {levels} levels (last difference {last_diff:e})")]
    Convergence {
        levels: usize,
        last_diff: f64,
        trace: Vec<(f64, f64)>,
    },
    #[error("field lacks capability: {0}")]
    Capability(&'static str),
    #[error("trajectory diverged at t={t}: |phi|={norm:e} exceeds guard {guard:e}")]
    Divergence { t: f64, norm: f64, guard: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
