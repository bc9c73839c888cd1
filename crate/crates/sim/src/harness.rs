//! Federated rounds driven entirely through the hub's HTTP API.

use std::time::Instant;

use flhub_core::aggregation::StalenessPolicy;
use flhub_core::model::{init_parameters, CompileInfo, ModelArchitecture, ParameterSet};
use flhub_core::registry::{Registry, VersionId, VersionSelector};
use flhub_core::trainer::{
    derive_seed, evaluate, generate_task, train_local, Dataset, Evaluation, TaskSpec, TrainMetrics,
};
use flhub_hub::api::ControlAction;
use flhub_hub::{ApiKeyRecord, Hub, HubClient, HubHandle, KeyStore, Role};

use crate::config::{ExperimentConfig, ForkMode, StalenessConfig};
use crate::error::{SimError, SimResult};

/// How one client trains in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlan {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl LocalPlan {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            samples: config.samples_per_round,
            epochs: config.local_epochs,
            batch_size: config.batch_size,
        }
    }
}

/// The task as instantiated for one seed: every task in an experiment gets
/// the same per-seed basis, so sources and target stay related.
pub fn seeded_task(task: &TaskSpec, seed: u64) -> TaskSpec {
    TaskSpec {
        shared_basis_seed: derive_seed(&[
            b"basis",
            &task.shared_basis_seed.to_le_bytes(),
            &seed.to_le_bytes(),
        ]),
        ..task.clone()
    }
}

pub fn test_set(task: &TaskSpec, n: usize, seed: u64) -> SimResult<Dataset> {
    Ok(generate_task(
        task,
        n,
        derive_seed(&[b"test", &seed.to_le_bytes()]),
    )?)
}

/// The samples client `client` draws in `round`. Independent of the arm, so
/// arms of one seed see identical data.
pub fn client_data(
    task: &TaskSpec,
    plan: &LocalPlan,
    seed: u64,
    round: u32,
    client: usize,
) -> SimResult<Dataset> {
    let data_seed = derive_seed(&[
        b"client-data",
        &seed.to_le_bytes(),
        &round.to_le_bytes(),
        &(client as u64).to_le_bytes(),
    ]);
    Ok(generate_task(task, plan.samples, data_seed)?)
}

/// One client's local training step, a pure function of its arguments.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    task: &TaskSpec,
    arch: &ModelArchitecture,
    params: &ParameterSet,
    compile: &CompileInfo,
    plan: &LocalPlan,
    seed: u64,
    round: u32,
    client: usize,
) -> SimResult<(ParameterSet, TrainMetrics)> {
    let data = client_data(task, plan, seed, round, client)?;
    let shuffle = derive_seed(&[
        b"client-shuffle",
        &seed.to_le_bytes(),
        &round.to_le_bytes(),
        &(client as u64).to_le_bytes(),
    ]);
    Ok(train_local(
        arch,
        params,
        &data,
        compile,
        plan.epochs,
        plan.batch_size,
        shuffle,
    )?)
}

pub fn init_seed(label: &str, seed: u64) -> u64 {
    derive_seed(&[b"init", label.as_bytes(), &seed.to_le_bytes()])
}

pub fn head_seed(seed: u64) -> u64 {
    derive_seed(&[b"head", &seed.to_le_bytes()])
}

pub const SIM_MANAGER_KEY: &str = "sim-manager-key-000000";

pub fn sim_client_key(i: usize) -> String {
    format!("sim-client-key-{i:06}")
}

/// Keys for a private hub: one manager, `clients` participants named
/// `client-1..`.
pub fn sim_keys(clients: usize) -> KeyStore {
    let mut records = vec![ApiKeyRecord {
        key: SIM_MANAGER_KEY.into(),
        principal_id: "manager".into(),
        role: Role::Manager,
        authorized_models: vec!["*".into()],
    }];
    records.extend((1..=clients).map(|i| ApiKeyRecord {
        key: sim_client_key(i),
        principal_id: format!("client-{i}"),
        role: Role::Participant,
        authorized_models: vec!["*".into()],
    }));
    KeyStore::new(records).expect("generated keys are valid")
}

/// A manager plus participant connections, optionally owning the hub.
pub struct Federation {
    pub manager: HubClient,
    pub clients: Vec<HubClient>,
    hub: Option<HubHandle>,
}

impl Federation {
    pub fn connect(config: &ExperimentConfig) -> SimResult<Self> {
        match &config.hub {
            Some(remote) => Ok(Self {
                manager: HubClient::new(&remote.url, Some(&remote.manager_key)),
                clients: remote
                    .client_keys
                    .iter()
                    .take(config.clients)
                    .map(|k| HubClient::new(&remote.url, Some(k)))
                    .collect(),
                hub: None,
            }),
            None => {
                let hub = Hub::spawn_with(
                    Registry::in_memory(),
                    sim_keys(config.clients),
                    "127.0.0.1:0".parse().expect("loopback address"),
                    false,
                )?;
                let url = hub.url();
                Ok(Self {
                    manager: HubClient::new(&url, Some(SIM_MANAGER_KEY)),
                    clients: (1..=config.clients)
                        .map(|i| HubClient::new(&url, Some(&sim_client_key(i))))
                        .collect(),
                    hub: Some(hub),
                })
            }
        }
    }

    pub fn hub(&self) -> Option<&HubHandle> {
        self.hub.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    /// 1-based.
    pub client: usize,
    pub base_version: VersionId,
    pub sample_count: u64,
    pub metrics: TrainMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    pub arm: String,
    pub seed: u64,
    pub head_version: VersionId,
    pub test: Evaluation,
    /// Sample-weighted mean of the clients' train accuracy (0 for round 0).
    pub train_accuracy: f64,
    pub clients: Vec<ClientReport>,
    pub duration_ms: u64,
}

/// Everything a round needs besides the round index.
pub struct RoundContext<'a> {
    pub model: String,
    pub arm: String,
    pub task: &'a TaskSpec,
    pub plan: LocalPlan,
    pub seed: u64,
    pub test: &'a Dataset,
    pub staleness: Option<&'a StalenessConfig>,
    pub timings: bool,
}

/// Tracks the versions the registry rules say the next round must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VersionTrack {
    next_minor: u32,
}

impl VersionTrack {
    /// For a model whose only version is `1.0.0`.
    pub fn fresh() -> Self {
        Self { next_minor: 1 }
    }
}

fn expect_version(what: &str, got: VersionId, want: VersionId) -> SimResult<()> {
    if got == want {
        Ok(())
    } else {
        Err(SimError::Protocol(format!(
            "{what}: expected {want}, hub reports {got}"
        )))
    }
}

/// Branch the head, let every client train on the branch and push, merge
/// all fresh results, then evaluate the new head on the test set.
pub fn run_round(
    fed: &Federation,
    ctx: &RoundContext,
    round: u32,
    track: &mut VersionTrack,
) -> SimResult<RoundMetrics> {
    let started = Instant::now();
    let previous = fed.manager.info(&ctx.model)?.head;
    let branch = fed
        .manager
        .control(
            &ctx.model,
            &ControlAction::Branch {
                base_version: previous,
            },
        )?
        .head;
    expect_version("branch", branch, VersionId::new(1, track.next_minor, 0))?;
    track.next_minor += 1;

    let stale_client = ctx.staleness.filter(|s| s.round == round).map(|s| s.client);
    let results: Vec<SimResult<ClientReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = fed
            .clients
            .iter()
            .enumerate()
            .map(|(i, client)| {
                let index = i + 1;
                let base = if stale_client == Some(index) {
                    previous
                } else {
                    branch
                };
                scope.spawn(move || -> SimResult<ClientReport> {
                    let model = client.get_model(&ctx.model, VersionSelector::Exact(base))?;
                    let (params, metrics) = local_update(
                        ctx.task,
                        &model.arch,
                        &model.params,
                        &model.compile,
                        &ctx.plan,
                        ctx.seed,
                        round,
                        index,
                    )?;
                    let count = ctx.plan.samples as u64;
                    client.push_result(&ctx.model, model.version, &params, count, metrics)?;
                    Ok(ClientReport {
                        client: index,
                        base_version: model.version,
                        sample_count: count,
                        metrics,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });
    let clients = results.into_iter().collect::<SimResult<Vec<_>>>()?;

    let policy = ctx.staleness.map(|s| s.policy).unwrap_or_default();
    let merged = fed.manager.control(
        &ctx.model,
        &ControlAction::Merge {
            base_version: branch,
            contribution_ids: None,
            policy,
        },
    )?;
    let mut expected = VersionId::new(1, branch.minor, 1);
    if stale_client.is_some() && policy == StalenessPolicy::RebranchOld {
        expected = VersionId::new(1, track.next_minor, 1);
        track.next_minor += 1;
    }
    expect_version("merge", merged.head, expected)?;

    let head = fed
        .manager
        .get_model(&ctx.model, VersionSelector::Exact(merged.head))?;
    let test = evaluate(&head.arch, &head.params, ctx.test)?;
    let total: u64 = clients.iter().map(|c| c.sample_count).sum();
    let train_accuracy = clients
        .iter()
        .map(|c| c.metrics.train_accuracy * c.sample_count as f64)
        .sum::<f64>()
        / total as f64;
    Ok(RoundMetrics {
        round,
        arm: ctx.arm.clone(),
        seed: ctx.seed,
        head_version: merged.head,
        test,
        train_accuracy,
        clients,
        duration_ms: if ctx.timings {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

/// The starting point of an arm, reported as round 0.
fn initial_metrics(fed: &Federation, ctx: &RoundContext) -> SimResult<RoundMetrics> {
    let model = fed.manager.get_model(&ctx.model, VersionSelector::Head)?;
    Ok(RoundMetrics {
        round: 0,
        arm: ctx.arm.clone(),
        seed: ctx.seed,
        head_version: model.version,
        test: evaluate(&model.arch, &model.params, ctx.test)?,
        train_accuracy: 0.0,
        clients: Vec::new(),
        duration_ms: 0,
    })
}

/// Round 0 followed by `rounds` federated rounds.
pub fn run_rounds(
    fed: &Federation,
    ctx: &RoundContext,
    rounds: u32,
) -> SimResult<Vec<RoundMetrics>> {
    let mut track = VersionTrack::fresh();
    let mut out = vec![initial_metrics(fed, ctx)?];
    for round in 1..=rounds {
        out.push(run_round(fed, ctx, round, &mut track)?);
    }
    Ok(out)
}

pub fn arch_for(config: &ExperimentConfig, task: &TaskSpec) -> SimResult<ModelArchitecture> {
    Ok(ModelArchitecture::mlp(
        task.input_dim,
        &config.hidden,
        task.num_classes,
    )?)
}

fn create_scratch(
    fed: &Federation,
    config: &ExperimentConfig,
    name: &str,
    task: &TaskSpec,
    init: u64,
) -> SimResult<()> {
    let arch = arch_for(config, task)?;
    let params = init_parameters(&arch, init);
    fed.manager.create_model(
        name,
        &arch,
        &params,
        &CompileInfo::sgd(config.learning_rate)?,
    )?;
    Ok(())
}

/// Every arm's per-round metrics for every seed, in (seed, arm, round) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub target_accuracy: f64,
    pub rounds: Vec<RoundMetrics>,
}

/// Trains each source from scratch, then runs each arm on the target task.
/// Model names are `{model}-{source|arm}-s{seed}`.
pub fn run_experiment(config: &ExperimentConfig) -> SimResult<ExperimentReport> {
    config.validate()?;
    let fed = Federation::connect(config)?;
    let plan = LocalPlan::from_config(config);
    let mut rounds = Vec::new();
    for &seed in &config.seeds {
        let task = seeded_task(&config.task, seed);
        let test = test_set(&task, config.test_samples, seed)?;
        let mut source_heads = Vec::new();
        for source in &config.sources {
            let source_task = seeded_task(&source.task, seed);
            let source_test = test_set(&source_task, config.test_samples, seed)?;
            let name = format!("{}-{}-s{seed}", config.model, source.name);
            create_scratch(
                &fed,
                config,
                &name,
                &source_task,
                init_seed(&source.name, seed),
            )?;
            let ctx = RoundContext {
                model: name.clone(),
                arm: source.name.clone(),
                task: &source_task,
                plan,
                seed,
                test: &source_test,
                staleness: None,
                timings: config.timings,
            };
            let history = run_rounds(&fed, &ctx, source.rounds)?;
            let last = history.last().expect("at least round 0");
            eprintln!(
                "seed {seed}: source `{}` trained {} rounds, test accuracy {:.4}",
                source.name, source.rounds, last.test.accuracy
            );
            source_heads.push((source.name.clone(), name, last.head_version));
        }
        for arm in &config.arms {
            let name = format!("{}-{}-s{seed}", config.model, arm.name);
            match &arm.fork_source {
                None => create_scratch(&fed, config, &name, &task, init_seed("target", seed))?,
                Some(src) => {
                    let (_, source_model, version) = source_heads
                        .iter()
                        .find(|(s, _, _)| s == src)
                        .expect("validated source");
                    let action = match arm.fork_mode {
                        ForkMode::All => ControlAction::ForkAll {
                            new_name: name.clone(),
                            source_version: Some(*version),
                        },
                        ForkMode::FeatureOnly => ControlAction::ForkFeature {
                            head_seed: head_seed(seed),
                            new_classes: task.num_classes,
                            new_name: name.clone(),
                            source_version: Some(*version),
                        },
                    };
                    fed.manager.control(source_model, &action)?;
                }
            }
            let ctx = RoundContext {
                model: name,
                arm: arm.name.clone(),
                task: &task,
                plan,
                seed,
                test: &test,
                staleness: config.staleness.as_ref(),
                timings: config.timings,
            };
            let history = run_rounds(&fed, &ctx, config.rounds)?;
            eprintln!(
                "seed {seed}: arm `{}` final test accuracy {:.4}",
                arm.name,
                history.last().expect("at least round 0").test.accuracy
            );
            rounds.extend(history);
        }
    }
    Ok(ExperimentReport {
        name: config.name.clone(),
        target_accuracy: config.target_accuracy,
        rounds,
    })
}
