use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("negative input {value} at flat index {index} (log transform needs v > -1)")]
    NegativeInput { index: usize, value: f64 },

    #[error("degenerate distribution: quantile spread {spread:e} is below 1e-9")]
    DegenerateDistribution { spread: f64 },

    #[error("need at least {needed} pooled values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("format error in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("training mask exceeds observation mask at flat index {index}")]
    MaskViolation { index: usize },

    #[error("loss diverged at step {step}: {loss}")]
    DivergedLoss { step: usize, loss: f64 },

    #[error("non-finite sampler state: {0}")]
    NonFiniteState(String),

    #[error("schedule needs at least 2 levels, got {0}")]
    Schedule(usize),

    #[error("empty spectrum: every wavenumber bin was excluded")]
    EmptySpectrum,

    #[error("every grid cell has zero temporal variance")]
    AllConstant,

    #[error("operator is not linear")]
    NonLinearOperator,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
