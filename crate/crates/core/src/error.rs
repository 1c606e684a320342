//! Shared error type for the whole laboratory.

use thiserror::Error;

/// Errors surfaced by measure, transport, solver and analysis operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is malformed (dimension mismatch, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A constructed value would violate a type invariant.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// An input exceeds a configured size limit.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A stated precondition of an operation does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// A function produced a non-finite value where a finite one is required.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// An iterative numerical procedure failed (blow-up, no convergence, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag, used by the CLI to map exit codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "argument",
            Error::ContractViolation(_) => "contract",
            Error::Capacity(_) => "capacity",
            Error::Precondition(_) => "precondition",
            Error::Evaluation(_) => "evaluation",
            Error::Numerical(_) => "numerical",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}
