use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use flhub_core::registry::Registry;

use crate::api::{ErrorBody, API_KEY_HEADER, API_PREFIX, VERSION_HEADER};
use crate::auth::KeyStore;
use crate::error::{ApiError, HubError};
use crate::service::HubService;

const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;

/// What `flhub serve` reads from its TOML config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub key_file: PathBuf,
}

impl HubConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, HubError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HubError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: HubConfig =
            toml::from_str(&text).map_err(|e| HubError::Config(e.to_string()))?;
        // Relative paths are taken relative to the config file.
        let dir = path.parent().unwrap_or(std::path::Path::new("."));
        config.data_dir = dir.join(&config.data_dir);
        config.key_file = dir.join(&config.key_file);
        Ok(config)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: self.code,
            message: self.message,
        };
        (status, Json(body)).into_response()
    }
}

fn api_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get(API_KEY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
}

/// Registry calls block on disk I/O, so they run off the async workers.
async fn blocking<T, F>(svc: HubService, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&HubService) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .unwrap_or_else(|e| Err(ApiError::new(500, "internal_error", e.to_string())))
}

async fn list_models(State(svc): State<HubService>, headers: HeaderMap) -> Response {
    let key = api_key(&headers);
    blocking(svc, move |s| s.list_models(key.as_deref()))
        .await
        .map(Json)
        .into_response()
}

async fn info(
    State(svc): State<HubService>,
    Path(name): Path<String>,
    headers: HeaderMap,
) -> Response {
    let key = api_key(&headers);
    blocking(svc, move |s| s.info(key.as_deref(), &name))
        .await
        .map(Json)
        .into_response()
}

async fn get_model(
    State(svc): State<HubService>,
    Path((name, version)): Path<(String, String)>,
    headers: HeaderMap,
) -> Response {
    let key = api_key(&headers);
    match blocking(svc, move |s| s.get_model(key.as_deref(), &name, &version)).await {
        Ok((version, bytes)) => {
            let version = HeaderValue::from_str(&version.to_string()).expect("ascii version");
            (
                [
                    (
                        header::CONTENT_TYPE,
                        HeaderValue::from_static("application/json"),
                    ),
                    (header::HeaderName::from_static(VERSION_HEADER), version),
                ],
                bytes,
            )
                .into_response()
        }
        Err(e) => e.into_response(),
    }
}

async fn create_model(State(svc): State<HubService>, headers: HeaderMap, body: Bytes) -> Response {
    let key = api_key(&headers);
    blocking(svc, move |s| s.create_model(key.as_deref(), &body))
        .await
        .map(|r| (StatusCode::CREATED, Json(r)))
        .into_response()
}

async fn push_result(
    State(svc): State<HubService>,
    Path(name): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let key = api_key(&headers);
    blocking(svc, move |s| s.push_result(key.as_deref(), &name, &body))
        .await
        .map(Json)
        .into_response()
}

async fn status(
    State(svc): State<HubService>,
    Path(name): Path<String>,
    headers: HeaderMap,
) -> Response {
    let key = api_key(&headers);
    blocking(svc, move |s| s.status(key.as_deref(), &name))
        .await
        .map(Json)
        .into_response()
}

async fn control(
    State(svc): State<HubService>,
    Path(name): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let key = api_key(&headers);
    blocking(svc, move |s| s.control(key.as_deref(), &name, &body))
        .await
        .map(Json)
        .into_response()
}

pub fn router(service: HubService) -> Router {
    let api = Router::new()
        .route("/models", get(list_models).post(create_model))
        .route("/models/{name}/info", get(info))
        .route("/models/{name}/versions/{version}", get(get_model))
        .route("/models/{name}/results", post(push_result))
        .route("/models/{name}/status", get(status))
        .route("/models/{name}/control", post(control));
    Router::new()
        .nest(API_PREFIX, api)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(service)
}

/// A hub running on its own thread and runtime.
#[derive(Debug)]
pub struct HubHandle {
    addr: SocketAddr,
    service: HubService,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl HubHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn registry(&self) -> &Registry {
        self.service.registry()
    }

    /// Stops accepting connections, drains in-flight requests and joins.
    pub fn shutdown(mut self) -> Result<(), HubError> {
        self.stop()
    }

    /// Blocks until the server exits on its own (for example on Ctrl-C).
    pub fn wait(mut self) -> Result<(), HubError> {
        match self.thread.take() {
            Some(t) => t.join().expect("hub thread panicked").map_err(HubError::Io),
            None => Ok(()),
        }
    }

    fn stop(&mut self) -> Result<(), HubError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().expect("hub thread panicked").map_err(HubError::Io),
            None => Ok(()),
        }
    }
}

impl Drop for HubHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

pub struct Hub;

impl Hub {
    /// Opens the data directory, loads keys and starts listening.
    pub fn spawn(config: &HubConfig) -> Result<HubHandle, HubError> {
        let keys = KeyStore::load(&config.key_file)?;
        let registry = Registry::open(&config.data_dir)?;
        Self::spawn_with(registry, keys, config.listen, false)
    }

    /// `ctrl_c` additionally stops the server on SIGINT.
    pub fn spawn_with(
        registry: Registry,
        keys: KeyStore,
        listen: SocketAddr,
        ctrl_c: bool,
    ) -> Result<HubHandle, HubError> {
        let listener = TcpListener::bind(listen).map_err(|source| HubError::Bind {
            addr: listen.to_string(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let service = HubService::new(Arc::new(registry), Arc::new(keys));
        let app = router(service.clone());
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .thread_name("flhub-hub")
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("flhub-hub".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    tracing::info!(%addr, "hub listening");
                    axum::serve(listener, app)
                        .with_graceful_shutdown(async move {
                            if ctrl_c {
                                tokio::select! {
                                    _ = rx => {}
                                    _ = tokio::signal::ctrl_c() => {}
                                }
                            } else {
                                let _ = rx.await;
                            }
                        })
                        .await
                })
            })?;
        Ok(HubHandle {
            addr,
            service,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }
}
