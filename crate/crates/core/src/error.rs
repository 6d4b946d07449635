use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("forecaster has not been fitted")]
    Unfitted,

    #[error("singular least-squares system (use a ridge penalty > 0)")]
    Singular,

    #[error("calibration set too small for theory correction")]
    CalibrationTooSmall,

    #[error("no Markov-bound candidate level satisfies the target coverage")]
    NoMarkovCandidate,

    #[error("root finding did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
