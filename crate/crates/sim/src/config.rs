use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use flhub_core::aggregation::StalenessPolicy;
use flhub_core::registry::validate_name;
use flhub_core::trainer::TaskSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkMode {
    All,
    FeatureOnly,
}

/// A model trained from scratch before the arms start, to fork from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub name: String,
    pub task: TaskSpec,
    #[serde(default = "default_source_rounds")]
    pub rounds: u32,
}

/// One line of the comparison: scratch, or a fork of a named source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    #[serde(default)]
    pub fork_source: Option<String>,
    #[serde(default = "default_fork_mode")]
    pub fork_mode: ForkMode,
}

/// One client trains against the previous head in `round` instead of the
/// freshly opened branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StalenessConfig {
    pub policy: StalenessPolicy,
    /// 1-based client index.
    pub client: usize,
    /// 2 or later, so that an older version exists.
    pub round: u32,
}

/// Connection to an already running hub. Without it, each run starts a
/// private hub on a loopback port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteHub {
    pub url: String,
    pub manager_key: String,
    pub client_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output file prefix, e.g. `fig4` gives `fig4_curves.csv`.
    pub name: String,
    pub model: String,
    pub task: TaskSpec,
    pub clients: usize,
    pub rounds: u32,
    pub samples_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Write measured wall-clock times. Off by default so reruns produce
    /// byte-identical CSVs (`duration_ms` is then 0).
    #[serde(default)]
    pub timings: bool,
    #[serde(default)]
    pub hub: Option<RemoteHub>,
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    #[serde(default = "default_arms")]
    pub arms: Vec<ArmConfig>,
    #[serde(default)]
    pub staleness: Option<StalenessConfig>,
}

fn default_source_rounds() -> u32 {
    50
}

fn default_fork_mode() -> ForkMode {
    ForkMode::FeatureOnly
}

fn default_target() -> f64 {
    0.85
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}

fn default_test_samples() -> usize {
    2000
}

fn default_arms() -> Vec<ArmConfig> {
    vec![ArmConfig {
        name: "scratch".into(),
        fork_source: None,
        fork_mode: ForkMode::FeatureOnly,
    }]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.clients == 0 || self.rounds == 0 {
            return bad("clients and rounds must be at least 1".into());
        }
        if self.samples_per_round == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return bad("samples_per_round, local_epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return bad("target_accuracy must be in (0, 1]".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.test_samples == 0 || self.hidden.contains(&0) {
            return bad("test_samples and hidden widths must be positive".into());
        }
        let check_task = |t: &TaskSpec| {
            t.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if t.input_dim != self.task.input_dim {
                return bad(format!("task `{}` has a different input_dim", t.task_id));
            }
            Ok(())
        };
        check_task(&self.task)?;
        let model_name = |part: &str| {
            validate_name("model", &format!("{}-{part}-s0", self.model))
                .map_err(|e| ConfigError::Invalid(e.to_string()))
        };
        validate_name("model", &self.model).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for part in self
            .sources
            .iter()
            .map(|s| &s.name)
            .chain(self.arms.iter().map(|a| &a.name))
        {
            model_name(part)?;
        }
        let mut names = BTreeSet::new();
        for source in &self.sources {
            check_task(&source.task)?;
            if source.rounds == 0 || !names.insert(source.name.as_str()) {
                return bad(format!(
                    "source `{}` is duplicated or has no rounds",
                    source.name
                ));
            }
        }
        let mut arms = BTreeSet::new();
        if self.arms.is_empty() {
            return bad("at least one arm is required".into());
        }
        for arm in &self.arms {
            if !arms.insert(arm.name.as_str()) || arm.name.contains(',') {
                return bad(format!(
                    "arm name `{}` is duplicated or contains a comma",
                    arm.name
                ));
            }
            if let Some(src) = &arm.fork_source {
                let Some(source) = self.sources.iter().find(|s| &s.name == src) else {
                    return bad(format!("arm `{}` forks unknown source `{src}`", arm.name));
                };
                if arm.fork_mode == ForkMode::All
                    && source.task.num_classes != self.task.num_classes
                {
                    return bad(format!(
                        "arm `{}`: fork_mode all needs the source and target class counts to match",
                        arm.name
                    ));
                }
            }
        }
        if let Some(s) = &self.staleness {
            if s.client == 0 || s.client > self.clients || s.round < 2 || s.round > self.rounds {
                return bad(
                    "staleness needs 1 <= client <= clients and 2 <= round <= rounds".into(),
                );
            }
        }
        if let Some(hub) = &self.hub {
            if hub.client_keys.len() < self.clients {
                return bad("hub.client_keys needs one key per client".into());
            }
        }
        Ok(())
    }
}
