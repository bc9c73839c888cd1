//! JSON bodies exchanged under `/api/v1`.

use serde::{Deserialize, Serialize};

use flhub_core::aggregation::StalenessPolicy;
use flhub_core::model::{LayerParamsWire, ModelDocument};
use flhub_core::registry::{ModelStatus, ModelVersionRecord, VersionId};
use flhub_core::trainer::TrainMetrics;

pub const API_PREFIX: &str = "/api/v1";
pub const API_KEY_HEADER: &str = "x-api-key";
pub const VERSION_HEADER: &str = "x-model-version";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelList {
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub classes: usize,
    pub head: VersionId,
    pub name: String,
    pub versions: Vec<VersionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateModelRequest {
    pub name: String,
    #[serde(flatten)]
    pub model: ModelDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushResultRequest {
    pub base_version: VersionId,
    pub metrics: TrainMetrics,
    pub parameters: Vec<LayerParamsWire>,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushResultResponse {
    pub head: VersionId,
    pub id: String,
    /// True when the push was not made against the current head.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub name: String,
    #[serde(flatten)]
    pub status: ModelStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ControlAction {
    /// Average pending contributions into a new micro version on `base_version`.
    /// Without `contribution_ids`, every pending contribution is considered.
    Merge {
        base_version: VersionId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        contribution_ids: Option<Vec<String>>,
        #[serde(default)]
        policy: StalenessPolicy,
    },
    Ignore {
        contribution_ids: Vec<String>,
    },
    Branch {
        base_version: VersionId,
    },
    /// `source_version` defaults to the head.
    ForkAll {
        new_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_version: Option<VersionId>,
    },
    ForkFeature {
        head_seed: u64,
        new_classes: usize,
        new_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_version: Option<VersionId>,
    },
}

impl ControlAction {
    pub fn merge(base_version: VersionId) -> Self {
        ControlAction::Merge {
            base_version,
            contribution_ids: None,
            policy: StalenessPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResponse {
    /// Head of the model the action targeted (the new model for forks).
    pub head: VersionId,
    pub ignored: Vec<String>,
    pub merged: Vec<String>,
    /// Version records created by the action, in creation order.
    pub records: Vec<ModelVersionRecord>,
}
