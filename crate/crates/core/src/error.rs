use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, out of range, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// An exact oracle would need to enumerate more sequences than allowed.
    #[error("oracle unavailable: enumeration of {needed} sequences exceeds budget {budget}")]
    Budget { needed: u128, budget: u128 },
    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("quality gate failed: {0}")]
    Gate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
