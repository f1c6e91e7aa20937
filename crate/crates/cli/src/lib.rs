//! Experiment driver for `hartree-core`: configuration, subcommands and
//! result persistence.

pub mod config;
pub mod output;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{run, Experiment, RunOutput};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Numerical {
        context: String,
        #[source]
        source: hartree_core::Error,
    },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical { source, .. } if matches!(source, hartree_core::Error::Io(_)) => 1,
            RunError::Numerical { .. } => 3,
            RunError::Io(_) => 1,
        }
    }
}

/// Attaches module context to core errors.
pub(crate) trait Context<T> {
    fn context(self, what: &str) -> Result<T, RunError>;
}

impl<T> Context<T> for hartree_core::Result<T> {
    fn context(self, what: &str) -> Result<T, RunError> {
        self.map_err(|source| RunError::Numerical {
            context: what.to_string(),
            source,
        })
    }
}
