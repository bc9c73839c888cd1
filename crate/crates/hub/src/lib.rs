//! HTTP front end for the model registry, plus a blocking client SDK.
//!
//! Endpoints live under `/api/v1` and authenticate with an `X-API-Key`
//! header. Managers may call everything on the models their key covers;
//! participants may read and push results.

pub mod api;
pub mod auth;
pub mod client;
pub mod error;
pub mod server;
pub mod service;

pub use auth::{ApiKeyRecord, KeyStore, Role};
pub use client::{ClientError, DownloadedModel, HubClient};
pub use error::{ApiError, HubError};
pub use server::{router, Hub, HubConfig, HubHandle};
pub use service::HubService;
