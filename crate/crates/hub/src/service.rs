use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use flhub_core::aggregation::{fedavg, filter_stale, StaleAction, WeightedParams};
use flhub_core::model::{decode_parameters, serialize_model};
use flhub_core::registry::{
    Contribution, ContributionRequest, Registry, VersionId, VersionSelector,
};
use flhub_core::Error;

use crate::api::{
    ControlAction, ControlResponse, CreateModelRequest, ModelInfo, ModelList, PushResultRequest,
    PushResultResponse, StatusResponse,
};
use crate::auth::{ApiKeyRecord, KeyStore, Role};
use crate::error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

/// Transport-independent request handling: authentication, authorization
/// and the registry/aggregation calls behind each endpoint.
#[derive(Debug, Clone)]
pub struct HubService {
    registry: Arc<Registry>,
    keys: Arc<KeyStore>,
}

impl HubService {
    pub fn new(registry: Arc<Registry>, keys: Arc<KeyStore>) -> Self {
        Self { registry, keys }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn authenticate(&self, key: Option<&str>) -> ApiResult<&ApiKeyRecord> {
        key.and_then(|k| self.keys.lookup(k))
            .ok_or_else(ApiError::unauthorized)
    }

    fn authorize_model(principal: &ApiKeyRecord, model: &str) -> ApiResult<()> {
        if principal.authorizes(model) {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!(
                "`{}` is not authorized for model `{model}`",
                principal.principal_id
            )))
        }
    }

    fn require_manager(principal: &ApiKeyRecord, model: &str) -> ApiResult<()> {
        if principal.role != Role::Manager {
            return Err(ApiError::forbidden(format!(
                "`{}` is not a manager",
                principal.principal_id
            )));
        }
        Self::authorize_model(principal, model)
    }

    pub fn list_models(&self, key: Option<&str>) -> ApiResult<ModelList> {
        self.authenticate(key)?;
        Ok(ModelList {
            models: self.registry.list_models(),
        })
    }

    pub fn info(&self, key: Option<&str>, name: &str) -> ApiResult<ModelInfo> {
        self.authenticate(key)?;
        let status = self.registry.get_status(name)?;
        let head = self
            .registry
            .get_model(name, VersionSelector::Exact(status.head))?;
        Ok(ModelInfo {
            classes: head.arch.num_classes(),
            head: status.head,
            name: name.to_owned(),
            versions: status.history.iter().map(|r| r.version).collect(),
        })
    }

    /// Returns the resolved version and its canonical encoding.
    pub fn get_model(
        &self,
        key: Option<&str>,
        name: &str,
        version: &str,
    ) -> ApiResult<(VersionId, Vec<u8>)> {
        self.authenticate(key)?;
        let selector: VersionSelector = version.parse()?;
        let snap = self.registry.get_model(name, selector)?;
        let bytes = serialize_model(&snap.arch, &snap.params, &snap.compile)?;
        Ok((snap.version, bytes))
    }

    pub fn create_model(
        &self,
        key: Option<&str>,
        body: &[u8],
    ) -> ApiResult<flhub_core::registry::ModelVersionRecord> {
        let principal = self.authenticate(key)?;
        let req: CreateModelRequest = serde_json::from_slice(body)?;
        Self::require_manager(principal, &req.name)?;
        let (arch, params, compile) = req.model.decode()?;
        Ok(self
            .registry
            .create_model(&req.name, &arch, &params, &compile)?)
    }

    pub fn push_result(
        &self,
        key: Option<&str>,
        name: &str,
        body: &[u8],
    ) -> ApiResult<PushResultResponse> {
        let principal = self.authenticate(key)?;
        Self::authorize_model(principal, name)?;
        let req: PushResultRequest = serde_json::from_slice(body)?;
        let base = self
            .registry
            .get_model(name, VersionSelector::Exact(req.base_version))?;
        let params = decode_parameters(&base.arch, &req.parameters)?;
        let id = self.registry.submit_contribution(ContributionRequest {
            model_name: name.to_owned(),
            base_version: req.base_version,
            params,
            sample_count: req.sample_count,
            metrics: req.metrics,
            participant_id: principal.principal_id.clone(),
        })?;
        let head = self.registry.head(name)?;
        Ok(PushResultResponse {
            head,
            id,
            stale: head != req.base_version,
        })
    }

    pub fn status(&self, key: Option<&str>, name: &str) -> ApiResult<StatusResponse> {
        self.authenticate(key)?;
        Ok(StatusResponse {
            name: name.to_owned(),
            status: self.registry.get_status(name)?,
        })
    }

    pub fn control(
        &self,
        key: Option<&str>,
        name: &str,
        body: &[u8],
    ) -> ApiResult<ControlResponse> {
        let principal = self.authenticate(key)?;
        let action: ControlAction = serde_json::from_slice(body)?;
        Self::require_manager(principal, name)?;
        if let ControlAction::ForkAll { new_name, .. }
        | ControlAction::ForkFeature { new_name, .. } = &action
        {
            Self::authorize_model(principal, new_name)?;
        }
        tracing::debug!(model = name, principal = %principal.principal_id, ?action, "control");
        self.apply_control(name, action)
    }

    fn apply_control(&self, name: &str, action: ControlAction) -> ApiResult<ControlResponse> {
        let reg = &self.registry;
        match action {
            ControlAction::Merge {
                base_version,
                contribution_ids,
                policy,
            } => self.merge(name, base_version, contribution_ids, policy),
            ControlAction::Ignore { contribution_ids } => {
                reg.mark_ignored(name, &contribution_ids)?;
                Ok(ControlResponse {
                    head: reg.head(name)?,
                    ignored: contribution_ids,
                    merged: Vec::new(),
                    records: Vec::new(),
                })
            }
            ControlAction::Branch { base_version } => {
                let record = reg.create_branch(name, base_version)?;
                Ok(single(record))
            }
            ControlAction::ForkAll {
                new_name,
                source_version,
            } => {
                let source = self.resolve(name, source_version)?;
                Ok(single(reg.fork_all(name, source, &new_name)?))
            }
            ControlAction::ForkFeature {
                head_seed,
                new_classes,
                new_name,
                source_version,
            } => {
                let source = self.resolve(name, source_version)?;
                Ok(single(reg.fork_feature_only(
                    name,
                    source,
                    &new_name,
                    new_classes,
                    head_seed,
                )?))
            }
        }
    }

    fn resolve(&self, name: &str, version: Option<VersionId>) -> ApiResult<VersionId> {
        match version {
            Some(v) => Ok(v),
            None => Ok(self.registry.head(name)?),
        }
    }

    fn select(
        &self,
        pending: &[Contribution],
        all: &[Contribution],
        ids: &[String],
    ) -> ApiResult<Vec<Contribution>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if !seen.insert(id.as_str()) {
                return Err(
                    Error::InvalidArgument(format!("contribution `{id}` listed twice")).into(),
                );
            }
            match pending.iter().find(|c| &c.id == id) {
                Some(c) => out.push(c.clone()),
                None if all.iter().any(|c| &c.id == id) => {
                    return Err(Error::ContributionNotPending(id.clone()).into())
                }
                None => return Err(Error::ContributionNotFound(id.clone()).into()),
            }
        }
        Ok(out)
    }

    fn average(
        &self,
        name: &str,
        group: &[Contribution],
    ) -> ApiResult<flhub_core::model::ParameterSet> {
        let inputs = group
            .iter()
            .map(|c| {
                Ok(WeightedParams::new(
                    c.id.clone(),
                    self.registry.contribution_params(name, &c.id)?,
                    c.sample_count,
                ))
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(fedavg(&inputs)?)
    }

    /// Every aggregate is computed before the first write, so validation
    /// failures leave the registry untouched.
    fn merge(
        &self,
        name: &str,
        base: VersionId,
        ids: Option<Vec<String>>,
        policy: flhub_core::aggregation::StalenessPolicy,
    ) -> ApiResult<ControlResponse> {
        let reg = &self.registry;
        let status = reg.get_status(name)?;
        if base != status.head {
            return Err(Error::StaleBase {
                base,
                head: status.head,
            }
            .into());
        }
        let selected = match &ids {
            Some(ids) => self.select(&status.pending, &status.contributions, ids)?,
            None => status.pending.clone(),
        };
        let split = filter_stale(&selected, status.head, policy);
        let rebranch: BTreeMap<VersionId, Vec<Contribution>> = match &split.stale {
            StaleAction::Rebranch(groups) => groups.clone(),
            StaleAction::Ignore(_) => BTreeMap::new(),
        };
        if split.fresh.is_empty() && rebranch.is_empty() {
            return Err(Error::EmptyAggregation.into());
        }
        let fresh_avg = if split.fresh.is_empty() {
            None
        } else {
            Some(self.average(name, &split.fresh)?)
        };
        let mut branch_avgs = Vec::with_capacity(rebranch.len());
        for (old_base, group) in &rebranch {
            branch_avgs.push((*old_base, ids_of(group), self.average(name, group)?));
        }

        let mut response = ControlResponse {
            head: status.head,
            ignored: Vec::new(),
            merged: Vec::new(),
            records: Vec::new(),
        };
        if let Some(avg) = fresh_avg {
            let fresh_ids = ids_of(&split.fresh);
            response
                .records
                .push(reg.record_merge(name, base, &avg, &fresh_ids)?);
            response.merged.extend(fresh_ids);
        }
        if let StaleAction::Ignore(stale) = &split.stale {
            if !stale.is_empty() {
                let stale_ids = ids_of(stale);
                reg.mark_ignored(name, &stale_ids)?;
                response.ignored = stale_ids;
            }
        }
        for (old_base, group_ids, avg) in branch_avgs {
            let branch = reg.create_branch(name, old_base)?;
            let merged = reg.record_merge(name, branch.version, &avg, &group_ids)?;
            response.records.push(branch);
            response.records.push(merged);
            response.merged.extend(group_ids);
        }
        response.head = reg.head(name)?;
        Ok(response)
    }
}

fn ids_of(list: &[Contribution]) -> Vec<String> {
    list.iter().map(|c| c.id.clone()).collect()
}

fn single(record: flhub_core::registry::ModelVersionRecord) -> ControlResponse {
    ControlResponse {
        head: record.version,
        ignored: Vec::new(),
        merged: Vec::new(),
        records: vec![record],
    }
}
