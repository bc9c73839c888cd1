#![allow(dead_code)]

use std::collections::BTreeMap;

use flhub_core::model::{init_parameters, CompileInfo, ModelArchitecture, ParameterSet};
use flhub_core::registry::{ModelEvent, Registry};
use flhub_core::trainer::TrainMetrics;
use flhub_hub::{ApiKeyRecord, Hub, HubClient, HubHandle, KeyStore, Role};

pub const MANAGER: &str = "manager-key-0000000001";
pub const OTHER_MANAGER: &str = "manager-key-0000000002";
pub const OUTSIDER: &str = "outsider-key-000000001";

pub fn participant_key(i: usize) -> String {
    format!("participant-key-{i:06}")
}

pub fn keys() -> KeyStore {
    let mut records = vec![
        ApiKeyRecord {
            key: MANAGER.into(),
            principal_id: "manager".into(),
            role: Role::Manager,
            authorized_models: vec!["*".into()],
        },
        ApiKeyRecord {
            key: OTHER_MANAGER.into(),
            principal_id: "other-manager".into(),
            role: Role::Manager,
            authorized_models: vec!["other-*".into()],
        },
        ApiKeyRecord {
            key: OUTSIDER.into(),
            principal_id: "outsider".into(),
            role: Role::Participant,
            authorized_models: vec!["other-*".into()],
        },
    ];
    for i in 1..=5 {
        records.push(ApiKeyRecord {
            key: participant_key(i),
            principal_id: format!("client-{i}"),
            role: Role::Participant,
            authorized_models: vec!["mnist*".into(), "caltech-*".into()],
        });
    }
    KeyStore::new(records).unwrap()
}

pub fn spawn_memory() -> HubHandle {
    Hub::spawn_with(
        Registry::in_memory(),
        keys(),
        "127.0.0.1:0".parse().unwrap(),
        false,
    )
    .unwrap()
}

pub fn manager(hub: &HubHandle) -> HubClient {
    HubClient::new(&hub.url(), Some(MANAGER))
}

pub fn participant(hub: &HubHandle, i: usize) -> HubClient {
    HubClient::new(&hub.url(), Some(&participant_key(i)))
}

pub fn small_arch(classes: usize) -> ModelArchitecture {
    ModelArchitecture::mlp(6, &[5], classes).unwrap()
}

pub fn create(hub: &HubHandle, name: &str, classes: usize) -> (ModelArchitecture, ParameterSet) {
    let arch = small_arch(classes);
    let params = init_parameters(&arch, 7);
    manager(hub)
        .create_model(name, &arch, &params, &CompileInfo::sgd(0.05).unwrap())
        .unwrap();
    (arch, params)
}

pub fn metrics(acc: f64) -> TrainMetrics {
    TrainMetrics {
        train_accuracy: acc,
        train_loss: 1.0 - acc,
    }
}

/// Deterministic per-client perturbation of `params`.
pub fn perturbed(params: &ParameterSet, client: usize) -> ParameterSet {
    let mut out = params.clone();
    for (i, v) in out
        .layers
        .iter_mut()
        .flat_map(|l| l.scalars_mut())
        .enumerate()
    {
        *v += ((i * 31 + client * 17) % 13) as f32 * 0.01 - 0.06;
    }
    out
}

/// Independent weighted mean: f64 accumulation, inputs in the given order.
pub fn oracle_mean(inputs: &[(&ParameterSet, u64)]) -> Vec<f32> {
    let total: f64 = inputs.iter().map(|(_, n)| *n as f64).sum();
    let flats: Vec<Vec<f32>> = inputs
        .iter()
        .map(|(p, _)| p.layers.iter().flat_map(|l| l.scalars().copied()).collect())
        .collect();
    (0..flats[0].len())
        .map(|s| {
            inputs
                .iter()
                .zip(&flats)
                .map(|((_, n), f)| (*n as f64 / total) * f[s] as f64)
                .sum::<f64>() as f32
        })
        .collect()
}

pub fn flatten(params: &ParameterSet) -> Vec<f32> {
    params
        .layers
        .iter()
        .flat_map(|l| l.scalars().copied())
        .collect()
}

pub fn event_lines(registry: &Registry) -> BTreeMap<String, Vec<String>> {
    registry
        .events()
        .into_iter()
        .map(|(k, v)| (k, v.iter().map(ModelEvent::to_line).collect()))
        .collect()
}
