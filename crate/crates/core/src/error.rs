use thiserror::Error;

/// Errors produced by model construction, simulation and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation diverged at t = {time:.6} s (non-finite state)")]
    Diverged { time: f64, state: Vec<f64> },

    #[error("not certifiable: {0}")]
    NotCertifiable(String),

    #[error("steady-state oracle failed after {iterations} iterations (residual {residual:.3e})")]
    OracleFailure { iterations: usize, residual: f64 },

    #[error("empty summary window [{start}, {end}) s")]
    EmptyWindow { start: f64, end: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
