use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model fitting: {0}")]
    Fit(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid revenue curve: {0}")]
    Curve(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("infeasible budget: need at least {required} but budget is {budget}")]
    InfeasibleBudget { required: f64, budget: f64 },

    #[error("quota {quota} exceeds latency cap {cap}")]
    CapViolation { quota: u32, cap: u32 },

    #[error("length mismatch: {left} models vs {right} quotas")]
    LengthMismatch { left: usize, right: usize },

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("non-finite controller input: {0}")]
    NonFinite(f64),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("no cap triple in the grid meets the latency deadline")]
    NoFeasibleCaps,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
