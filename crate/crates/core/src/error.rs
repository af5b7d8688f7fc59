use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid simulation protocol: {0}")]
    InvalidProtocol(String),

    #[error("invalid link configuration: {0}")]
    InvalidLink(String),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("analytic hitting-time formulas only hold without a plane")]
    PlaneNotSupported,

    #[error("channel memory {memory} at t_s = {t_s} s needs {needed} s of hit times, record covers {horizon} s")]
    HorizonExceeded {
        memory: usize,
        t_s: f64,
        needed: f64,
        horizon: f64,
    },

    #[error("corrupt record {path}: {reason}")]
    CorruptRecord { path: PathBuf, reason: String },

    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by user input rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidTopology(_)
                | Error::InvalidProtocol(_)
                | Error::InvalidLink(_)
                | Error::InvalidSweep(_)
                | Error::PlaneNotSupported
                | Error::HorizonExceeded { .. }
                | Error::Config { .. }
        )
    }
}
