//! Core of the federated model hub.
//!
//! - [`model`]: dense network architectures, parameter sets, seeded
//!   initialization and the canonical JSON+blob encoding.
//! - [`registry`]: the versioned, event-sourced model store (branch, fork,
//!   contribution, merge, ignore).
//! - [`aggregation`]: sample-weighted federated averaging, multi-task merge
//!   and staleness filtering.
//! - [`trainer`]: a small from-scratch dense-network trainer and a synthetic
//!   task generator.

pub mod aggregation;
pub mod error;
pub mod model;
pub mod registry;
pub mod trainer;

pub use error::{Error, Result};
