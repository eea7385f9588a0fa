//! Command implementations behind the `lightinfer` binary.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{Config, ConfigError, Variant};
pub use report::Table;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] lightinfer_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure traces back to the user's configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Core(lightinfer_core::Error::InvalidConfig(_))
        )
    }
}
