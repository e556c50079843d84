//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or configuration value violates its invariants.
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A timestep outside the schedule's valid range.
    #[error("timestep {t} out of range (schedule has {t_max} steps)")]
    TimestepOutOfRange { t: usize, t_max: usize },

    /// The requested stochasticity is incompatible with the schedule.
    #[error("invalid eta {eta} at t={t} for {kind} schedule: sigma^2 exceeds 1 - alpha_bar[t-1]")]
    InvalidEta { eta: f64, t: usize, kind: String },

    /// A computation produced NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Line-oriented data file failed to parse.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// An operation received an empty collection it cannot work on.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// All centroids coincide; no direction can be fitted.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
