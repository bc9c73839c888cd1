use thiserror::Error;

use crate::registry::VersionId;

/// Errors raised by the model, registry, aggregation and trainer layers.
///
/// Every variant maps onto a stable machine-readable code (see [`Error::code`])
/// which is what travels over the wire.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter shapes do not match the architecture")]
    ShapeMismatch,
    #[error("malformed model encoding: {0}")]
    Parse(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model `{0}` already exists")]
    ModelExists(String),
    #[error("model `{0}` not found")]
    ModelNotFound(String),
    #[error("version {1} of model `{0}` not found")]
    VersionNotFound(String, VersionId),
    #[error("contribution `{0}` not found")]
    ContributionNotFound(String),
    #[error("participant already contributed against this model version")]
    DuplicateContribution,
    #[error("base version {base} is not the current head {head}")]
    StaleBase { base: VersionId, head: VersionId },
    #[error("contribution `{0}` is not pending")]
    ContributionNotPending(String),
    #[error("nothing to aggregate")]
    EmptyAggregation,
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch => "shape_mismatch",
            Error::Parse(_) => "parse_error",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ModelExists(_) => "model_exists",
            Error::ModelNotFound(_) => "model_not_found",
            Error::VersionNotFound(..) => "version_not_found",
            Error::ContributionNotFound(_) => "contribution_not_found",
            Error::DuplicateContribution => "duplicate_contribution",
            Error::StaleBase { .. } => "stale_base",
            Error::ContributionNotPending(_) => "contribution_not_pending",
            Error::EmptyAggregation => "empty_aggregation",
            Error::CorruptLog(_) => "corrupt_log",
            Error::Io(_) => "io_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
