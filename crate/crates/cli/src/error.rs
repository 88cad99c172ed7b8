use region_dit_core::prompts::PromptError;
use thiserror::Error;

/// Top-level failure, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} failed: {message}")]
    Pipeline { stage: &'static str, message: String },
    #[error("transport error: {0}")]
    Transport(String),
}

impl CliError {
    pub fn field(field: &str, message: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{field}: {message}"))
    }

    pub fn pipeline(stage: &'static str, err: impl std::fmt::Display) -> Self {
        CliError::Pipeline {
            stage,
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline { .. } => 3,
            CliError::Transport(_) => 4,
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Transport { .. } => CliError::Transport(e.to_string()),
            PromptError::Request(m) => CliError::Config(format!("prompts.llm: {m}")),
            PromptError::Schema { .. } => CliError::pipeline("prompts", e),
        }
    }
}
