use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("hub request failed: {0}")]
    Client(#[from] flhub_hub::ClientError),
    #[error(transparent)]
    Hub(#[from] flhub_hub::HubError),
    #[error(transparent)]
    Core(#[from] flhub_core::Error),
    /// The hub answered, but not as the protocol requires.
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type SimResult<T> = Result<T, SimError>;
