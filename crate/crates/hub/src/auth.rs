use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::HubError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Manager,
    Participant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiKeyRecord {
    pub key: String,
    pub principal_id: String,
    pub role: Role,
    /// Glob patterns (`*`, `?`, `[...]`) over model names.
    #[serde(default)]
    pub authorized_models: Vec<String>,
}

impl ApiKeyRecord {
    pub fn authorizes(&self, model: &str) -> bool {
        self.authorized_models.iter().any(|p| {
            glob::Pattern::new(p)
                .map(|pat| pat.matches(model))
                .unwrap_or(false)
        })
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct KeyFile {
    #[serde(default)]
    keys: Vec<ApiKeyRecord>,
}

/// The static set of API keys a hub accepts.
#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    by_key: HashMap<String, ApiKeyRecord>,
}

pub const MIN_KEY_LEN: usize = 16;

impl KeyStore {
    pub fn new(records: Vec<ApiKeyRecord>) -> Result<Self, HubError> {
        let mut by_key = HashMap::with_capacity(records.len());
        for record in records {
            if record.key.chars().count() < MIN_KEY_LEN {
                return Err(HubError::Config(format!(
                    "key for `{}` is shorter than {MIN_KEY_LEN} characters",
                    record.principal_id
                )));
            }
            for pattern in &record.authorized_models {
                glob::Pattern::new(pattern)
                    .map_err(|e| HubError::Config(format!("bad model pattern `{pattern}`: {e}")))?;
            }
            if by_key.contains_key(&record.key) {
                return Err(HubError::Config(format!(
                    "duplicate key for `{}`",
                    record.principal_id
                )));
            }
            by_key.insert(record.key.clone(), record);
        }
        Ok(Self { by_key })
    }

    pub fn from_toml(text: &str) -> Result<Self, HubError> {
        let file: KeyFile = toml::from_str(text).map_err(|e| HubError::Config(e.to_string()))?;
        Self::new(file.keys)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HubError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HubError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        let mut keys: Vec<_> = self.by_key.values().cloned().collect();
        keys.sort_by(|a, b| a.principal_id.cmp(&b.principal_id));
        toml::to_string(&KeyFile { keys }).expect("key file serializes")
    }

    pub fn lookup(&self, key: &str) -> Option<&ApiKeyRecord> {
        self.by_key.get(key)
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}
