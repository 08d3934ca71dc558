//! The fedsilo client agent: registers an endpoint, long-polls the
//! orchestrator for tasks, trains and evaluates on local data, applies
//! differential privacy to updates and reports resource heartbeats.

pub mod config;
pub mod executor;
pub mod resources;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

pub use config::AgentConfig;
pub use executor::{Execution, Executor};
pub use runner::{Agent, RunSummary, StopHandle};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] fedsilo_core::DataError),
    /// The server no longer accepts this agent's token or endpoint.
    #[error("stopped: {0}")]
    Rejected(String),
}
