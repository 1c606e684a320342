//! Scenario harness for the fpklab laboratory: configuration, execution,
//! run manifests, replay, and plot-data emission.

pub mod assemble;
pub mod config;
pub mod manifest;
pub mod plotdata;
pub mod runner;

use thiserror::Error;

/// Harness-level failures. Exit codes: 0 pass, 1 experiment fail (bound
/// violated or iteration diverged), 2 configuration error, 3 numerical or
/// I/O error.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fpklab::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(e) => match e.kind() {
                "argument" | "contract" | "capacity" | "precondition" | "parse" => 2,
                _ => 3,
            },
            HarnessError::Io(_) => 3,
        }
    }
}

/// Exit code for a completed run whose pass flag is false.
pub const EXIT_FAIL: i32 = 1;
