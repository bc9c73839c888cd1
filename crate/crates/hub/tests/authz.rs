mod common;

use flhub_core::model::{init_parameters, CompileInfo};
use flhub_core::registry::{VersionId, VersionSelector};
use flhub_hub::api::ControlAction;
use flhub_hub::{ClientError, HubClient};

use common::*;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Endpoint {
    List,
    Info,
    GetModel,
    Status,
    Push,
    Control,
    Create,
}

const ENDPOINTS: [Endpoint; 7] = [
    Endpoint::List,
    Endpoint::Info,
    Endpoint::GetModel,
    Endpoint::Status,
    Endpoint::Push,
    Endpoint::Control,
    Endpoint::Create,
];

/// (label, key, expected outcome per endpoint: None = allowed, Some(status) = denied)
type Row = (&'static str, Option<String>, [Option<u16>; 7]);

fn matrix() -> Vec<Row> {
    let ok = None;
    let deny = Some(403);
    let anon = Some(401);
    vec![
        ("anonymous", None, [anon; 7]),
        ("bad key", Some("definitely-not-a-key".into()), [anon; 7]),
        (
            "manager, authorized",
            Some(MANAGER.into()),
            [ok, ok, ok, ok, ok, ok, ok],
        ),
        (
            "manager, other models",
            Some(OTHER_MANAGER.into()),
            [ok, ok, ok, ok, deny, deny, deny],
        ),
        (
            "participant, authorized",
            Some(participant_key(1)),
            [ok, ok, ok, ok, ok, deny, deny],
        ),
        (
            "participant, other models",
            Some(OUTSIDER.into()),
            [ok, ok, ok, ok, deny, deny, deny],
        ),
    ]
}

fn call(client: &HubClient, endpoint: Endpoint, cell: usize) -> Result<(), ClientError> {
    let arch = small_arch(4);
    let params = init_parameters(&arch, 1);
    match endpoint {
        Endpoint::List => client.list_models().map(drop),
        Endpoint::Info => client.info("mnist").map(drop),
        Endpoint::GetModel => client.get_model("mnist", VersionSelector::Head).map(drop),
        Endpoint::Status => client.status("mnist").map(drop),
        Endpoint::Push => client
            .push_result("mnist", VersionId::INITIAL, &params, 8, metrics(0.5))
            .map(drop),
        Endpoint::Control => client
            .control(
                "mnist",
                &ControlAction::Branch {
                    base_version: VersionId::INITIAL,
                },
            )
            .map(drop),
        Endpoint::Create => client
            .create_model(
                &format!("mnist-{cell}"),
                &arch,
                &params,
                &CompileInfo::sgd(0.1).unwrap(),
            )
            .map(drop),
    }
}

#[test]
fn every_role_endpoint_pair() {
    let hub = spawn_memory();
    create(&hub, "mnist", 4);
    let mut cell = 0;
    for (label, key, expected) in matrix() {
        let client = HubClient::new(&hub.url(), key.as_deref());
        for (endpoint, want) in ENDPOINTS.iter().zip(expected) {
            cell += 1;
            let got = call(&client, *endpoint, cell);
            match want {
                None => assert!(got.is_ok(), "{label} {endpoint:?}: {got:?}"),
                Some(status) => assert_eq!(
                    got.as_ref().err().and_then(ClientError::status),
                    Some(status),
                    "{label} {endpoint:?}: {got:?}"
                ),
            }
        }
    }
}
