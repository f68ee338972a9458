//! Pipeline driver behind the `cytocap` binary. Each stage reads the outputs
//! of earlier stages from the output directory, checks their config hashes
//! and writes its own.

pub mod artifacts;
pub mod config;
pub mod stages;

pub use config::{LlmMode, Overrides, RunConfig, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, missing or mismatched inputs; nothing was run.
    #[error("{0}")]
    Validation(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Stage { .. } | CliError::Io(_) => 3,
        }
    }
}
