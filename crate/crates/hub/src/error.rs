use std::io;

use thiserror::Error;

/// Startup and configuration failures.
#[derive(Debug, Error)]
pub enum HubError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Registry(#[from] flhub_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A failed request as seen on the wire: a status and a stable code.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{status} {code}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_owned(),
            message: message.into(),
        }
    }

    pub fn unauthorized() -> Self {
        Self::new(401, "unauthorized", "missing or unknown API key")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(403, "forbidden", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "parse_error", message)
    }
}

impl From<flhub_core::Error> for ApiError {
    fn from(err: flhub_core::Error) -> Self {
        use flhub_core::Error as E;
        let status = match &err {
            E::ModelNotFound(_) | E::VersionNotFound(..) | E::ContributionNotFound(_) => 404,
            E::ModelExists(_)
            | E::DuplicateContribution
            | E::StaleBase { .. }
            | E::ContributionNotPending(_) => 409,
            E::ShapeMismatch | E::InvalidModel(_) | E::InvalidArgument(_) | E::EmptyAggregation => {
                422
            }
            E::Parse(_) => 400,
            E::CorruptLog(_) | E::Io(_) => 500,
        };
        Self::new(status, err.code(), err.to_string())
    }
}

impl From<serde_json::Error> for ApiError {
    fn from(err: serde_json::Error) -> Self {
        Self::bad_request(err.to_string())
    }
}
