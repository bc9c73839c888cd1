//! The versioned model store.
//!
//! Each model is a DAG of [`ModelVersionRecord`]s plus a list of
//! [`Contribution`]s, persisted as an append-only event log. Live state is
//! always the fold of that log: every mutation builds an event, makes it
//! durable, then applies it with the same code path replay uses.
//!
//! Version rules: create and fork start at `1.0.0`; a branch opens a new
//! minor line with micro `0`; a merge bumps micro on the head.
//!
//! Writers to one model are serialized by that model's lock. Creating a
//! model (create or fork) additionally holds the model-table write lock so
//! the name is reserved atomically.

mod state;
mod store;
mod types;

pub use state::{ModelState, RegistryState};
pub use types::{
    validate_name, Annotation, ContentHash, Contribution, ContributionStatus, EventKind,
    EventPayload, IgnorePayload, MergePayload, ModelEvent, ModelVersionRecord, ParentRef,
    VersionId, VersionSelector,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use chrono::Utc;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_parameters, shape_check, CompileInfo, ModelArchitecture, ParameterSet};
use crate::trainer::TrainMetrics;
use store::{DiskStore, EventLog};

/// A participant's push, before it has been stored.
#[derive(Debug, Clone)]
pub struct ContributionRequest {
    pub model_name: String,
    pub base_version: VersionId,
    pub params: ParameterSet,
    pub sample_count: u64,
    pub metrics: TrainMetrics,
    pub participant_id: String,
}

/// Fully materialized model version.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub arch: ModelArchitecture,
    pub params: ParameterSet,
    pub compile: CompileInfo,
    pub version: VersionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStatus {
    pub head: VersionId,
    /// Pending contributions in submission order.
    pub pending: Vec<Contribution>,
    /// Every contribution in submission order, whatever its status.
    pub contributions: Vec<Contribution>,
    /// Records sorted by version.
    pub history: Vec<ModelVersionRecord>,
}

#[derive(Debug)]
struct ModelEntry {
    state: ModelState,
    events: Vec<ModelEvent>,
    log: Option<EventLog>,
}

impl ModelEntry {
    /// Persists then applies. On any failure the entry is left untouched.
    fn commit(&mut self, payload: EventPayload) -> Result<()> {
        let event = ModelEvent {
            payload,
            sequence_no: self.state.next_sequence(),
        };
        let mut next = self.state.clone();
        next.apply(&event)?;
        if let Some(log) = self.log.as_mut() {
            log.append(&event)?;
        }
        self.state = next;
        self.events.push(event);
        Ok(())
    }
}

#[derive(Debug, Default)]
struct BlobCache {
    blobs: HashMap<ContentHash, Arc<Vec<u8>>>,
    archs: HashMap<ContentHash, ModelArchitecture>,
}

#[derive(Debug, Default)]
pub struct Registry {
    disk: Option<DiskStore>,
    models: RwLock<BTreeMap<String, Arc<RwLock<ModelEntry>>>>,
    cache: RwLock<BlobCache>,
}

impl Registry {
    /// A registry that keeps everything in memory.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or initializes) a registry rooted at `root`, rebuilding state by
    /// replaying every model's event log.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let disk = DiskStore::open(root.as_ref())?;
        let logs = disk.load_all()?;
        let state = RegistryState::replay(&logs)?;
        for (name, model) in &state.models {
            for record in model.records.values() {
                for hash in [&record.arch_ref, &record.params_ref] {
                    if !disk.blob_exists(name, hash) {
                        return Err(Error::CorruptLog(format!(
                            "model `{name}` is missing blob {hash}"
                        )));
                    }
                }
            }
            for c in &model.contributions {
                if !disk.blob_exists(name, &c.params_ref) {
                    return Err(Error::CorruptLog(format!(
                        "contribution `{}` is missing blob {}",
                        c.id, c.params_ref
                    )));
                }
            }
        }
        let mut models = BTreeMap::new();
        for (name, model) in state.models {
            let entry = ModelEntry {
                log: Some(disk.open_log(&name)?),
                events: logs[&name].clone(),
                state: model,
            };
            models.insert(name, Arc::new(RwLock::new(entry)));
        }
        Ok(Self {
            disk: Some(disk),
            models: RwLock::new(models),
            cache: RwLock::default(),
        })
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.disk.as_ref().map(DiskStore::root)
    }

    fn entry(&self, name: &str) -> Result<Arc<RwLock<ModelEntry>>> {
        self.models
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::ModelNotFound(name.to_owned()))
    }

    fn put_blob(&self, model: &str, bytes: Vec<u8>) -> Result<ContentHash> {
        let hash = ContentHash::of(&bytes);
        if let Some(disk) = &self.disk {
            disk.write_blob(model, &hash, &bytes)?;
        }
        self.cache
            .write()
            .blobs
            .entry(hash.clone())
            .or_insert_with(|| Arc::new(bytes));
        Ok(hash)
    }

    /// Makes sure `hash` (already known to the registry) is stored under
    /// `model` too. Used when a fork shares the source's blobs.
    fn share_blob(&self, from: &str, to: &str, hash: &ContentHash) -> Result<()> {
        let bytes = self.blob(from, hash)?;
        if let Some(disk) = &self.disk {
            disk.write_blob(to, hash, &bytes)?;
        }
        Ok(())
    }

    fn blob(&self, model: &str, hash: &ContentHash) -> Result<Arc<Vec<u8>>> {
        if let Some(bytes) = self.cache.read().blobs.get(hash) {
            return Ok(bytes.clone());
        }
        let disk = self
            .disk
            .as_ref()
            .ok_or_else(|| Error::CorruptLog(format!("unknown blob {hash}")))?;
        let bytes = Arc::new(disk.read_blob(model, hash)?);
        self.cache.write().blobs.insert(hash.clone(), bytes.clone());
        Ok(bytes)
    }

    fn architecture(&self, model: &str, hash: &ContentHash) -> Result<ModelArchitecture> {
        if let Some(arch) = self.cache.read().archs.get(hash) {
            return Ok(arch.clone());
        }
        let arch = ModelArchitecture::from_canonical_json(&self.blob(model, hash)?)?;
        self.cache.write().archs.insert(hash.clone(), arch.clone());
        Ok(arch)
    }

    fn params(
        &self,
        model: &str,
        arch: &ModelArchitecture,
        hash: &ContentHash,
    ) -> Result<ParameterSet> {
        ParameterSet::from_blob(arch, &self.blob(model, hash)?)
    }

    fn store_model_blobs(
        &self,
        model: &str,
        arch: &ModelArchitecture,
        params: &ParameterSet,
    ) -> Result<(ContentHash, ContentHash)> {
        let arch_ref = self.put_blob(model, arch.to_canonical_json())?;
        self.cache
            .write()
            .archs
            .insert(arch_ref.clone(), arch.clone());
        let params_ref = self.put_blob(model, params.to_blob())?;
        Ok((arch_ref, params_ref))
    }

    /// Registers a new model, with `params` as version `1.0.0`.
    pub fn create_model(
        &self,
        name: &str,
        arch: &ModelArchitecture,
        params: &ParameterSet,
        compile: &CompileInfo,
    ) -> Result<ModelVersionRecord> {
        validate_name("model", name)?;
        if !shape_check(arch, params) {
            return Err(Error::ShapeMismatch);
        }
        if !params.is_finite() {
            return Err(Error::InvalidModel("non-finite parameter value".into()));
        }
        compile.validate()?;
        let mut models = self.models.write();
        if models.contains_key(name) {
            return Err(Error::ModelExists(name.to_owned()));
        }
        let (arch_ref, params_ref) = self.store_model_blobs(name, arch, params)?;
        let record = ModelVersionRecord {
            annotation: Annotation::Created,
            arch_ref,
            compile: *compile,
            created_at: Utc::now(),
            model_name: name.to_owned(),
            params_ref,
            parents: Vec::new(),
            version: VersionId::INITIAL,
        };
        let entry = self.new_entry(name, EventPayload::Create(record.clone()))?;
        models.insert(name.to_owned(), Arc::new(RwLock::new(entry)));
        Ok(record)
    }

    fn new_entry(&self, name: &str, payload: EventPayload) -> Result<ModelEntry> {
        let log = match &self.disk {
            Some(disk) => Some(disk.open_log(name)?),
            None => None,
        };
        let mut entry = ModelEntry {
            state: ModelState::new(name),
            events: Vec::new(),
            log,
        };
        entry.commit(payload)?;
        Ok(entry)
    }

    /// Opens the next minor line from `base` with identical parameters.
    ///
    /// The new minor is one past the largest minor already used under
    /// `base.major`, so branching from an old version still yields a new head.
    pub fn create_branch(&self, name: &str, base: VersionId) -> Result<ModelVersionRecord> {
        let entry = self.entry(name)?;
        let mut entry = entry.write();
        let base_record = entry.state.record(base)?.clone();
        let version = VersionId::new(base.major, entry.state.next_minor(base.major), 0);
        let record = ModelVersionRecord {
            annotation: Annotation::Branched,
            created_at: Utc::now(),
            parents: vec![ParentRef::new(name, base)],
            version,
            ..base_record
        };
        entry.commit(EventPayload::Branch(record.clone()))?;
        Ok(record)
    }

    /// Clones `source@version` into a new model, bit for bit.
    pub fn fork_all(
        &self,
        source_name: &str,
        source_version: VersionId,
        new_name: &str,
    ) -> Result<ModelVersionRecord> {
        validate_name("model", new_name)?;
        let mut models = self.models.write();
        let source = models
            .get(source_name)
            .cloned()
            .ok_or_else(|| Error::ModelNotFound(source_name.to_owned()))?;
        let source = source.read();
        let src = source.state.record(source_version)?.clone();
        if models.contains_key(new_name) {
            return Err(Error::ModelExists(new_name.to_owned()));
        }
        self.share_blob(source_name, new_name, &src.arch_ref)?;
        self.share_blob(source_name, new_name, &src.params_ref)?;
        let record = ModelVersionRecord {
            annotation: Annotation::ForkedAll,
            created_at: Utc::now(),
            model_name: new_name.to_owned(),
            parents: vec![ParentRef::new(source_name, source_version)],
            version: VersionId::INITIAL,
            ..src
        };
        let entry = self.new_entry(new_name, EventPayload::Fork(record.clone()))?;
        models.insert(new_name.to_owned(), Arc::new(RwLock::new(entry)));
        Ok(record)
    }

    /// Clones the feature layers of `source@version` and rebuilds the
    /// prediction head with `new_classes` outputs, initialized exactly as
    /// [`init_parameters`] would with `head_seed`.
    pub fn fork_feature_only(
        &self,
        source_name: &str,
        source_version: VersionId,
        new_name: &str,
        new_classes: usize,
        head_seed: u64,
    ) -> Result<ModelVersionRecord> {
        validate_name("model", new_name)?;
        if new_classes == 0 {
            return Err(Error::InvalidArgument(
                "new_classes must be positive".into(),
            ));
        }
        let mut models = self.models.write();
        let source = models
            .get(source_name)
            .cloned()
            .ok_or_else(|| Error::ModelNotFound(source_name.to_owned()))?;
        let source = source.read();
        let src = source.state.record(source_version)?.clone();
        if models.contains_key(new_name) {
            return Err(Error::ModelExists(new_name.to_owned()));
        }
        let src_arch = self.architecture(source_name, &src.arch_ref)?;
        let src_params = self.params(source_name, &src_arch, &src.params_ref)?;
        let arch = src_arch.with_num_classes(new_classes)?;
        let boundary = arch.prediction_boundary();
        let fresh = init_parameters(&arch, head_seed);
        let params = ParameterSet::new(
            src_params.layers[..boundary]
                .iter()
                .chain(&fresh.layers[boundary..])
                .cloned()
                .collect(),
        );
        let (arch_ref, params_ref) = self.store_model_blobs(new_name, &arch, &params)?;
        let record = ModelVersionRecord {
            annotation: Annotation::ForkedFeature,
            arch_ref,
            compile: src.compile,
            created_at: Utc::now(),
            model_name: new_name.to_owned(),
            params_ref,
            parents: vec![ParentRef::new(source_name, source_version)],
            version: VersionId::INITIAL,
        };
        let entry = self.new_entry(new_name, EventPayload::Fork(record.clone()))?;
        models.insert(new_name.to_owned(), Arc::new(RwLock::new(entry)));
        Ok(record)
    }

    /// Stores a pending contribution and returns its id.
    pub fn submit_contribution(&self, request: ContributionRequest) -> Result<String> {
        validate_name("participant", &request.participant_id)?;
        if request.sample_count == 0 {
            return Err(Error::InvalidArgument(
                "sample_count must be at least 1".into(),
            ));
        }
        request.metrics.validate()?;
        let entry = self.entry(&request.model_name)?;
        let mut entry = entry.write();
        let base = entry.state.record(request.base_version)?.clone();
        let arch = self.architecture(&request.model_name, &base.arch_ref)?;
        if !shape_check(&arch, &request.params) {
            return Err(Error::ShapeMismatch);
        }
        if !request.params.is_finite() {
            return Err(Error::InvalidArgument("non-finite parameter value".into()));
        }
        let id = Contribution::make_id(&request.participant_id, request.base_version);
        if entry.state.contribution(&id).is_some() {
            return Err(Error::DuplicateContribution);
        }
        let params_ref = self.put_blob(&request.model_name, request.params.to_blob())?;
        let contribution = Contribution {
            base_version: request.base_version,
            id: id.clone(),
            metrics: request.metrics,
            model_name: request.model_name.clone(),
            params_ref,
            participant_id: request.participant_id,
            sample_count: request.sample_count,
            status: ContributionStatus::Pending,
        };
        entry.commit(EventPayload::Contribution(contribution))?;
        Ok(id)
    }

    /// Records `merged_params` as the next micro version on top of `base`,
    /// which must be the head, and marks `merged_ids` merged.
    ///
    /// Each listed contribution must be pending and either based on `base`
    /// or, when `base` is a branch, on the version that branch was opened
    /// from (a branch carries its parent's parameters unchanged).
    pub fn record_merge(
        &self,
        name: &str,
        base: VersionId,
        merged_params: &ParameterSet,
        merged_ids: &[String],
    ) -> Result<ModelVersionRecord> {
        let entry = self.entry(name)?;
        let mut entry = entry.write();
        let head = entry.state.head();
        let base_record = entry.state.record(base)?.clone();
        if base != head {
            return Err(Error::StaleBase { base, head });
        }
        let arch = self.architecture(name, &base_record.arch_ref)?;
        if !shape_check(&arch, merged_params) {
            return Err(Error::ShapeMismatch);
        }
        if !merged_params.is_finite() {
            return Err(Error::InvalidArgument("non-finite parameter value".into()));
        }
        let branched_from = (base_record.annotation == Annotation::Branched)
            .then(|| base_record.parents.first().map(|p| p.version))
            .flatten();
        let mut seen = BTreeSet::new();
        let mut provenance = BTreeSet::new();
        for id in merged_ids {
            let c = entry
                .state
                .contribution(id)
                .ok_or_else(|| Error::ContributionNotFound(id.clone()))?;
            if c.status != ContributionStatus::Pending || !seen.insert(id) {
                return Err(Error::ContributionNotPending(id.clone()));
            }
            if c.base_version != base && Some(c.base_version) != branched_from {
                return Err(Error::InvalidArgument(format!(
                    "contribution `{id}` is based on {}, not {base}",
                    c.base_version
                )));
            }
            if c.base_version != base {
                provenance.insert(c.base_version);
            }
        }
        let params_ref = self.put_blob(name, merged_params.to_blob())?;
        let mut parents = vec![ParentRef::new(name, base)];
        parents.extend(provenance.into_iter().map(|v| ParentRef::new(name, v)));
        let record = ModelVersionRecord {
            annotation: Annotation::Merged,
            created_at: Utc::now(),
            params_ref,
            parents,
            version: VersionId::new(base.major, base.minor, base.micro + 1),
            ..base_record
        };
        entry.commit(EventPayload::Merge(MergePayload {
            merged_ids: merged_ids.to_vec(),
            record: record.clone(),
        }))?;
        Ok(record)
    }

    /// Marks pending contributions ignored. All or nothing.
    pub fn mark_ignored(&self, name: &str, ids: &[String]) -> Result<usize> {
        let entry = self.entry(name)?;
        let mut entry = entry.write();
        let mut seen = BTreeSet::new();
        for id in ids {
            let c = entry
                .state
                .contribution(id)
                .ok_or_else(|| Error::ContributionNotFound(id.clone()))?;
            if c.status != ContributionStatus::Pending || !seen.insert(id) {
                return Err(Error::ContributionNotPending(id.clone()));
            }
        }
        if ids.is_empty() {
            return Ok(0);
        }
        entry.commit(EventPayload::Ignore(IgnorePayload { ids: ids.to_vec() }))?;
        Ok(ids.len())
    }

    pub fn get_model(&self, name: &str, version: VersionSelector) -> Result<ModelSnapshot> {
        let entry = self.entry(name)?;
        let record = {
            let entry = entry.read();
            let version = match version {
                VersionSelector::Head => entry.state.head(),
                VersionSelector::Exact(v) => v,
            };
            entry.state.record(version)?.clone()
        };
        let arch = self.architecture(name, &record.arch_ref)?;
        let params = self.params(name, &arch, &record.params_ref)?;
        Ok(ModelSnapshot {
            arch,
            params,
            compile: record.compile,
            version: record.version,
        })
    }

    pub fn get_status(&self, name: &str) -> Result<ModelStatus> {
        let entry = self.entry(name)?;
        let entry = entry.read();
        Ok(ModelStatus {
            head: entry.state.head(),
            pending: entry.state.pending().cloned().collect(),
            contributions: entry.state.contributions.clone(),
            history: entry.state.records.values().cloned().collect(),
        })
    }

    /// Parameters pushed with a contribution.
    pub fn contribution_params(&self, name: &str, id: &str) -> Result<ParameterSet> {
        let entry = self.entry(name)?;
        let (contribution, arch_ref) = {
            let entry = entry.read();
            let c = entry
                .state
                .contribution(id)
                .ok_or_else(|| Error::ContributionNotFound(id.to_owned()))?
                .clone();
            let arch_ref = entry.state.record(c.base_version)?.arch_ref.clone();
            (c, arch_ref)
        };
        let arch = self.architecture(name, &arch_ref)?;
        self.params(name, &arch, &contribution.params_ref)
    }

    /// Stored blob by model and hash.
    pub fn blob_bytes(&self, name: &str, hash: &ContentHash) -> Result<Vec<u8>> {
        self.entry(name)?;
        Ok(self.blob(name, hash)?.as_ref().clone())
    }

    pub fn list_models(&self) -> Vec<String> {
        self.models.read().keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.models.read().contains_key(name)
    }

    pub fn head(&self, name: &str) -> Result<VersionId> {
        Ok(self.entry(name)?.read().state.head())
    }

    pub fn record(&self, name: &str, version: VersionId) -> Result<ModelVersionRecord> {
        Ok(self.entry(name)?.read().state.record(version)?.clone())
    }

    /// Copy of every model's event log.
    pub fn events(&self) -> BTreeMap<String, Vec<ModelEvent>> {
        self.models
            .read()
            .iter()
            .map(|(name, entry)| (name.clone(), entry.read().events.clone()))
            .collect()
    }

    /// Copy of the live state.
    pub fn snapshot(&self) -> RegistryState {
        RegistryState {
            models: self
                .models
                .read()
                .iter()
                .map(|(name, entry)| (name.clone(), entry.read().state.clone()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
