//! A standalone participant: waits for the manager to open a round, trains,
//! pushes, repeats.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use flhub_core::model::serialize_model;
use flhub_core::registry::{VersionId, VersionSelector};
use flhub_core::trainer::TaskSpec;
use flhub_hub::HubClient;

use crate::error::{SimError, SimResult};
use crate::harness::{local_update, LocalPlan};

#[derive(Debug, Clone)]
pub struct ParticipantOptions {
    pub model: String,
    /// Already seeded for `seed`.
    pub task: TaskSpec,
    pub plan: LocalPlan,
    pub seed: u64,
    /// 1-based; selects this participant's data stream.
    pub client: usize,
    pub rounds: u32,
    /// Each pushed model is also written here as `client{i}_{base}.json`.
    pub log_dir: Option<PathBuf>,
    pub poll: Duration,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushRecord {
    pub base_version: VersionId,
    pub contribution_id: String,
}

/// A round is open when the head is a fresh branch (`micro == 0`) other
/// than `1.0.0`; its minor number is the round index used to draw data.
pub fn participate(client: &HubClient, opts: &ParticipantOptions) -> SimResult<Vec<PushRecord>> {
    let mut done: BTreeSet<VersionId> = BTreeSet::new();
    let mut pushes = Vec::new();
    let mut idle_since = Instant::now();
    while pushes.len() < opts.rounds as usize {
        let head = client.info(&opts.model)?.head;
        let open = head.micro == 0 && head != VersionId::INITIAL && !done.contains(&head);
        if !open {
            if idle_since.elapsed() > opts.timeout {
                return Err(SimError::Protocol(format!(
                    "no new round opened on `{}` within {:?}",
                    opts.model, opts.timeout
                )));
            }
            std::thread::sleep(opts.poll);
            continue;
        }
        let model = client.get_model(&opts.model, VersionSelector::Exact(head))?;
        let (params, metrics) = local_update(
            &opts.task,
            &model.arch,
            &model.params,
            &model.compile,
            &opts.plan,
            opts.seed,
            head.minor,
            opts.client,
        )?;
        let resp = client.push_result(
            &opts.model,
            model.version,
            &params,
            opts.plan.samples as u64,
            metrics,
        )?;
        if let Some(dir) = &opts.log_dir {
            std::fs::create_dir_all(dir)?;
            let bytes = serialize_model(&model.arch, &params, &model.compile)?;
            std::fs::write(
                dir.join(format!("client{}_{}.json", opts.client, head)),
                bytes,
            )?;
        }
        eprintln!(
            "client {} pushed {} (train accuracy {:.4})",
            opts.client, resp.id, metrics.train_accuracy
        );
        done.insert(head);
        pushes.push(PushRecord {
            base_version: head,
            contribution_id: resp.id,
        });
        idle_since = Instant::now();
    }
    Ok(pushes)
}
