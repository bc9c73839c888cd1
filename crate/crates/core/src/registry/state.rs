//! Registry state as a fold over the event log.

use std::collections::{BTreeMap, BTreeSet};

use super::types::{
    Annotation, Contribution, ContributionStatus, EventPayload, ModelEvent, ModelVersionRecord,
    VersionId,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState {
    pub name: String,
    pub records: BTreeMap<VersionId, ModelVersionRecord>,
    /// Submission order.
    pub contributions: Vec<Contribution>,
    pub last_sequence: u64,
}

impl ModelState {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Default::default()
        }
    }

    /// Maximum version among the model's records.
    pub fn head(&self) -> VersionId {
        self.records.keys().next_back().copied().unwrap_or_default()
    }

    pub fn record(&self, version: VersionId) -> Result<&ModelVersionRecord> {
        self.records
            .get(&version)
            .ok_or_else(|| Error::VersionNotFound(self.name.clone(), version))
    }

    pub fn contribution(&self, id: &str) -> Option<&Contribution> {
        self.contributions.iter().find(|c| c.id == id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &Contribution> {
        self.contributions
            .iter()
            .filter(|c| c.status == ContributionStatus::Pending)
    }

    pub fn next_sequence(&self) -> u64 {
        self.last_sequence + 1
    }

    /// Next minor line under `major`: one past the largest minor in use.
    pub fn next_minor(&self, major: u32) -> u32 {
        self.records
            .keys()
            .filter(|v| v.major == major)
            .map(|v| v.minor)
            .max()
            .map_or(0, |m| m + 1)
    }

    fn check_new_record(&self, record: &ModelVersionRecord) -> Result<()> {
        let corrupt = |msg: String| Err(Error::CorruptLog(format!("model `{}`: {msg}", self.name)));
        if record.model_name != self.name {
            return corrupt(format!("record names model `{}`", record.model_name));
        }
        if self.records.contains_key(&record.version) {
            return corrupt(format!("version {} recorded twice", record.version));
        }
        if !self.records.is_empty() && record.version <= self.head() {
            return corrupt(format!(
                "version {} does not advance head {}",
                record.version,
                self.head()
            ));
        }
        match (record.annotation, record.parents.is_empty()) {
            (Annotation::Created, false) => return corrupt("created record has parents".into()),
            (Annotation::Created, true) => {}
            (_, true) => return corrupt(format!("{} has no parents", record.version)),
            _ => {}
        }
        for parent in record.parents.iter().filter(|p| p.model == self.name) {
            if !self.records.contains_key(&parent.version) {
                return corrupt(format!("forward reference to {}", parent.version));
            }
        }
        Ok(())
    }

    /// Applies one event, validating that it is consistent with the state so
    /// far. Cross-model parent links are checked by [`RegistryState::replay`].
    pub fn apply(&mut self, event: &ModelEvent) -> Result<()> {
        if event.sequence_no <= self.last_sequence {
            return Err(Error::CorruptLog(format!(
                "model `{}`: sequence {} after {}",
                self.name, event.sequence_no, self.last_sequence
            )));
        }
        let first = self.records.is_empty();
        match (&event.payload, first) {
            (EventPayload::Create(r) | EventPayload::Fork(r), true) => {
                let expected = if matches!(event.payload, EventPayload::Create(_)) {
                    r.annotation == Annotation::Created
                } else {
                    matches!(
                        r.annotation,
                        Annotation::ForkedAll | Annotation::ForkedFeature
                    )
                };
                if !expected || r.version != VersionId::INITIAL {
                    return Err(Error::CorruptLog(format!(
                        "model `{}`: bad initial record",
                        self.name
                    )));
                }
                self.check_new_record(r)?;
                self.records.insert(r.version, r.clone());
            }
            (_, true) => {
                return Err(Error::CorruptLog(format!(
                    "model `{}`: log does not start with create or fork",
                    self.name
                )))
            }
            (EventPayload::Create(_) | EventPayload::Fork(_), false) => {
                return Err(Error::CorruptLog(format!(
                    "model `{}`: second initial record",
                    self.name
                )))
            }
            (EventPayload::Branch(r), false) => {
                if r.annotation != Annotation::Branched {
                    return Err(Error::CorruptLog(
                        "branch event with wrong annotation".into(),
                    ));
                }
                self.check_new_record(r)?;
                self.records.insert(r.version, r.clone());
            }
            (EventPayload::Contribution(c), false) => {
                if c.model_name != self.name
                    || !self.records.contains_key(&c.base_version)
                    || self.contribution(&c.id).is_some()
                    || c.status != ContributionStatus::Pending
                {
                    return Err(Error::CorruptLog(format!(
                        "model `{}`: inconsistent contribution `{}`",
                        self.name, c.id
                    )));
                }
                self.contributions.push(c.clone());
            }
            (EventPayload::Merge(m), false) => {
                let r = &m.record;
                if r.annotation != Annotation::Merged {
                    return Err(Error::CorruptLog(
                        "merge event with wrong annotation".into(),
                    ));
                }
                self.check_new_record(r)?;
                self.transition(&m.merged_ids, ContributionStatus::Merged)?;
                self.records.insert(r.version, r.clone());
            }
            (EventPayload::Ignore(i), false) => {
                self.transition(&i.ids, ContributionStatus::Ignored)?;
            }
        }
        self.last_sequence = event.sequence_no;
        Ok(())
    }

    fn transition(&mut self, ids: &[String], to: ContributionStatus) -> Result<()> {
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::CorruptLog("contribution listed twice".into()));
        }
        for id in ids {
            match self.contribution(id) {
                Some(c) if c.status == ContributionStatus::Pending => {}
                _ => return Err(Error::CorruptLog(format!("`{id}` is not pending"))),
            }
        }
        for c in self.contributions.iter_mut() {
            if unique.contains(&c.id) {
                c.status = to;
            }
        }
        Ok(())
    }
}

/// Every model's state, keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegistryState {
    pub models: BTreeMap<String, ModelState>,
}

impl RegistryState {
    /// Rebuilds state from per-model event logs.
    pub fn replay(logs: &BTreeMap<String, Vec<ModelEvent>>) -> Result<Self> {
        let mut models = BTreeMap::new();
        for (name, events) in logs {
            let mut state = ModelState::new(name.clone());
            for event in events {
                state.apply(event)?;
            }
            models.insert(name.clone(), state);
        }
        let state = Self { models };
        state.check_cross_model_links()?;
        Ok(state)
    }

    /// Fork parents must exist, and the model-level fork graph must be acyclic.
    pub fn check_cross_model_links(&self) -> Result<()> {
        let mut edges: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (name, state) in &self.models {
            for record in state.records.values() {
                for parent in record.parents.iter().filter(|p| &p.model != name) {
                    let exists = self
                        .models
                        .get(&parent.model)
                        .is_some_and(|m| m.records.contains_key(&parent.version));
                    if !exists {
                        return Err(Error::CorruptLog(format!(
                            "model `{name}` references missing {}@{}",
                            parent.model, parent.version
                        )));
                    }
                    edges.entry(name).or_default().insert(&parent.model);
                }
            }
        }
        // Kahn-style peeling: repeatedly drop models with no outgoing links.
        let mut remaining = edges.clone();
        loop {
            let leaves: Vec<&str> = remaining
                .iter()
                .filter(|(_, out)| out.iter().all(|t| !remaining.contains_key(t)))
                .map(|(n, _)| *n)
                .collect();
            if leaves.is_empty() {
                break;
            }
            for leaf in leaves {
                remaining.remove(leaf);
            }
        }
        if remaining.is_empty() {
            Ok(())
        } else {
            Err(Error::CorruptLog("cyclic fork lineage".into()))
        }
    }
}
