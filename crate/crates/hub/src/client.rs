//! Blocking client for the hub's HTTP API.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use flhub_core::model::{
    deserialize_model, encode_parameters, CompileInfo, ModelArchitecture, ModelDocument,
    ParameterSet,
};
use flhub_core::registry::{ModelVersionRecord, VersionId, VersionSelector};
use flhub_core::trainer::TrainMetrics;

use crate::api::{
    ControlAction, ControlResponse, CreateModelRequest, ErrorBody, ModelInfo, ModelList,
    PushResultRequest, PushResultResponse, StatusResponse, API_KEY_HEADER, API_PREFIX,
    VERSION_HEADER,
};

const MAX_RESPONSE_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("hub answered {status} {code}: {message}")]
    Api {
        status: u16,
        code: String,
        message: String,
    },
    #[error("transport error: {0}")]
    Transport(#[from] ureq::Error),
    #[error("unexpected response body: {0}")]
    Decode(String),
    #[error(transparent)]
    Model(#[from] flhub_core::Error),
}

impl ClientError {
    /// The hub's error code, if the hub answered at all.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

/// A model as downloaded, with the exact bytes the hub sent.
#[derive(Debug, Clone, PartialEq)]
pub struct DownloadedModel {
    pub version: VersionId,
    pub arch: ModelArchitecture,
    pub params: ParameterSet,
    pub compile: CompileInfo,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct HubClient {
    agent: ureq::Agent,
    base: String,
    key: Option<String>,
}

impl HubClient {
    /// `url` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(url: &str, key: Option<&str>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Self {
            agent,
            base: format!("{}{}", url.trim_end_matches('/'), API_PREFIX),
            key: key.map(str::to_owned),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish(
        mut resp: ureq::http::Response<ureq::Body>,
    ) -> ClientResult<(u16, Option<String>, Vec<u8>)> {
        let status = resp.status().as_u16();
        let version = resp
            .headers()
            .get(VERSION_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let body = resp
            .body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_to_vec()?;
        if (200..300).contains(&status) {
            return Ok((status, version, body));
        }
        let err: ErrorBody = serde_json::from_slice(&body).unwrap_or(ErrorBody {
            error: "unknown".into(),
            message: String::from_utf8_lossy(&body).into_owned(),
        });
        Err(ClientError::Api {
            status,
            code: err.error,
            message: err.message,
        })
    }

    fn get_raw(&self, path: &str) -> ClientResult<(u16, Option<String>, Vec<u8>)> {
        let mut req = self.agent.get(self.url(path));
        if let Some(key) = &self.key {
            req = req.header(API_KEY_HEADER, key);
        }
        Self::finish(req.call()?)
    }

    fn post_raw(&self, path: &str, body: &[u8]) -> ClientResult<(u16, Option<String>, Vec<u8>)> {
        let mut req = self
            .agent
            .post(self.url(path))
            .content_type("application/json");
        if let Some(key) = &self.key {
            req = req.header(API_KEY_HEADER, key);
        }
        Self::finish(req.send(body)?)
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        let (_, _, body) = self.get_raw(path)?;
        decode(&body)
    }

    fn post_json<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> ClientResult<T> {
        let bytes = serde_json::to_vec(body).map_err(|e| ClientError::Decode(e.to_string()))?;
        let (_, _, body) = self.post_raw(path, &bytes)?;
        decode(&body)
    }

    pub fn list_models(&self) -> ClientResult<Vec<String>> {
        Ok(self.get_json::<ModelList>("/models")?.models)
    }

    pub fn info(&self, name: &str) -> ClientResult<ModelInfo> {
        self.get_json(&format!("/models/{name}/info"))
    }

    pub fn get_model_bytes(
        &self,
        name: &str,
        version: VersionSelector,
    ) -> ClientResult<(VersionId, Vec<u8>)> {
        let version = match version {
            VersionSelector::Head => "head".to_owned(),
            VersionSelector::Exact(v) => v.to_string(),
        };
        let (_, header, body) = self.get_raw(&format!("/models/{name}/versions/{version}"))?;
        let header = header.ok_or_else(|| ClientError::Decode("missing version header".into()))?;
        let version = header.parse()?;
        Ok((version, body))
    }

    pub fn get_model(&self, name: &str, version: VersionSelector) -> ClientResult<DownloadedModel> {
        let (version, bytes) = self.get_model_bytes(name, version)?;
        let (arch, params, compile) = deserialize_model(&bytes)?;
        Ok(DownloadedModel {
            version,
            arch,
            params,
            compile,
            bytes,
        })
    }

    pub fn create_model(
        &self,
        name: &str,
        arch: &ModelArchitecture,
        params: &ParameterSet,
        compile: &CompileInfo,
    ) -> ClientResult<ModelVersionRecord> {
        let body = CreateModelRequest {
            name: name.to_owned(),
            model: ModelDocument::new(arch, params, compile),
        };
        self.post_json("/models", &body)
    }

    pub fn push_result(
        &self,
        name: &str,
        base_version: VersionId,
        params: &ParameterSet,
        sample_count: u64,
        metrics: TrainMetrics,
    ) -> ClientResult<PushResultResponse> {
        let body = PushResultRequest {
            base_version,
            metrics,
            parameters: encode_parameters(params),
            sample_count,
        };
        self.post_json(&format!("/models/{name}/results"), &body)
    }

    pub fn status(&self, name: &str) -> ClientResult<StatusResponse> {
        self.get_json(&format!("/models/{name}/status"))
    }

    pub fn control(&self, name: &str, action: &ControlAction) -> ClientResult<ControlResponse> {
        self.post_json(&format!("/models/{name}/control"), action)
    }
}

fn decode<T: DeserializeOwned>(body: &[u8]) -> ClientResult<T> {
    serde_json::from_slice(body).map_err(|e| ClientError::Decode(e.to_string()))
}
