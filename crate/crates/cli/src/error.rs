use fedsilo_agent::AgentError;
use fedsilo_client::ClientError;
use thiserror::Error;

/// CLI failures. The exit code is a stable contract for scripts.
#[derive(Debug, Error)]
pub enum CliError {
    /// The server rejected the request or could not be reached.
    #[error("{0}")]
    Server(#[from] ClientError),
    /// Input rejected before anything was sent.
    #[error("{0}")]
    Validation(String),
    /// A local file could not be read, parsed as data, or written.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Server(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }

    /// Field-level details of a server-side validation failure.
    pub fn details(&self) -> Vec<String> {
        match self {
            CliError::Server(ClientError::Api { body, .. }) => {
                body.fields.iter().map(|f| f.to_string()).collect()
            }
            _ => Vec::new(),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Config(m) => CliError::Validation(m),
            AgentError::Io { .. } | AgentError::Data(_) => CliError::Io(e.to_string()),
            AgentError::Rejected(_) => CliError::Server(ClientError::Decode(e.to_string())),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
