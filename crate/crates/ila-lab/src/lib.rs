//! Experiment harness around `ila-core`: synthetic data, training loop,
//! checkpoints, reports, and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod report;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Core(ila_core::error::Error),
}

impl From<ila_core::error::Error> for LabError {
    fn from(e: ila_core::error::Error) -> Self {
        use ila_core::error::Error as E;
        match e {
            E::Config(m) | E::Shape(m) | E::Input(m) => LabError::Config(m),
            E::Numeric(m) => LabError::Divergence(m),
        }
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Config(e.to_string())
    }
}

impl LabError {
    /// Stable exit-code contract: 0 ok, 2 config, 3 divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Divergence(_) => 3,
            LabError::Io(_) => 4,
            LabError::Core(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
