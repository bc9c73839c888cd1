use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::model::CompileInfo;
use crate::trainer::TrainMetrics;

/// `(major, minor, micro)`, ordered lexicographically and rendered as
/// `major.minor.micro`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VersionId {
    pub major: u32,
    pub minor: u32,
    pub micro: u32,
}

impl VersionId {
    pub const INITIAL: VersionId = VersionId::new(1, 0, 0);

    pub const fn new(major: u32, minor: u32, micro: u32) -> Self {
        Self {
            major,
            minor,
            micro,
        }
    }
}

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.micro)
    }
}

impl FromStr for VersionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::InvalidArgument(format!("bad version `{s}`"));
        let mut parts = s.split('.');
        let mut next = || -> Result<u32, Error> {
            let part = parts.next().ok_or_else(bad)?;
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            part.parse().map_err(|_| bad())
        };
        let v = VersionId::new(next()?, next()?, next()?);
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(v)
    }
}

impl Serialize for VersionId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Either a concrete version or the model's head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSelector {
    Head,
    Exact(VersionId),
}

impl FromStr for VersionSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "head" {
            Ok(VersionSelector::Head)
        } else {
            s.parse().map(VersionSelector::Exact)
        }
    }
}

impl From<VersionId> for VersionSelector {
    fn from(v: VersionId) -> Self {
        VersionSelector::Exact(v)
    }
}

/// Lowercase hex SHA-256 of a blob.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContentHash(String);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(s: &str) -> Option<Self> {
        (s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')))
            .then(|| Self(s.to_owned()))
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Created,
    Merged,
    Branched,
    ForkedAll,
    ForkedFeature,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParentRef {
    pub model: String,
    pub version: VersionId,
}

impl ParentRef {
    pub fn new(model: impl Into<String>, version: VersionId) -> Self {
        Self {
            model: model.into(),
            version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersionRecord {
    pub annotation: Annotation,
    pub arch_ref: ContentHash,
    pub compile: CompileInfo,
    pub created_at: DateTime<Utc>,
    pub model_name: String,
    pub params_ref: ContentHash,
    pub parents: Vec<ParentRef>,
    pub version: VersionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContributionStatus {
    Pending,
    Merged,
    Ignored,
}

/// A participant's pushed training result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub base_version: VersionId,
    pub id: String,
    pub metrics: TrainMetrics,
    pub model_name: String,
    pub params_ref: ContentHash,
    pub participant_id: String,
    pub sample_count: u64,
    pub status: ContributionStatus,
}

impl Contribution {
    /// Contribution ids are derived from the duplicate-prevention key, so they
    /// are unique per model and independent of arrival order.
    pub fn make_id(participant_id: &str, base: VersionId) -> String {
        format!("{participant_id}@{base}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Create,
    Branch,
    Fork,
    Contribution,
    Merge,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePayload {
    pub merged_ids: Vec<String>,
    pub record: ModelVersionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgnorePayload {
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    Create(ModelVersionRecord),
    Branch(ModelVersionRecord),
    Fork(ModelVersionRecord),
    Contribution(Contribution),
    Merge(MergePayload),
    Ignore(IgnorePayload),
}

/// One line of a model's append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvent {
    #[serde(flatten)]
    pub payload: EventPayload,
    pub sequence_no: u64,
}

impl ModelEvent {
    pub fn kind(&self) -> EventKind {
        match self.payload {
            EventPayload::Create(_) => EventKind::Create,
            EventPayload::Branch(_) => EventKind::Branch,
            EventPayload::Fork(_) => EventKind::Fork,
            EventPayload::Contribution(_) => EventKind::Contribution,
            EventPayload::Merge(_) => EventKind::Merge,
            EventPayload::Ignore(_) => EventKind::Ignore,
        }
    }

    /// Single-line JSON with recursively sorted keys.
    pub fn to_line(&self) -> String {
        let value = serde_json::to_value(self).expect("event serializes");
        serde_json::to_string(&sorted(value)).expect("value serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, Error> {
        serde_json::from_str(line).map_err(|e| Error::CorruptLog(e.to_string()))
    }
}

fn sorted(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Model and participant names: 1 to 128 characters from `[A-Za-z0-9._-]`,
/// starting with an alphanumeric. They double as directory names.
pub fn validate_name(kind: &str, name: &str) -> Result<(), Error> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && name.as_bytes()[0].is_ascii_alphanumeric()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "invalid {kind} name `{name}`"
        )))
    }
}
