//! Simulation harness: drives a hub through its HTTP API with simulated
//! participants on synthetic tasks and records per-round metrics.

pub mod config;
pub mod error;
pub mod harness;
pub mod participant;
pub mod report;

pub use config::{ArmConfig, ExperimentConfig, ForkMode, SourceConfig, StalenessConfig};
pub use error::{SimError, SimResult};
pub use harness::{run_experiment, run_round, ExperimentReport, Federation, RoundMetrics};
