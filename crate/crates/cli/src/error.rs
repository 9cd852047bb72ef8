use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// A stage input that another subcommand produces is absent.
    #[error("{artifact} missing; run {producer}")]
    Missing { artifact: &'static str, producer: &'static str },

    #[error("run directory is locked by another process ({0}); wait for it to finish")]
    Locked(String),

    #[error("{0}")]
    Stage(String),

    #[error(transparent)]
    Core(#[from] rlhaif_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for usage errors, 2 for everything that fails inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
