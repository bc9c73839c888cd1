mod common;

use flhub_core::aggregation::StalenessPolicy;
use flhub_core::model::{
    deserialize_model, init_parameters, serialize_model, CompileInfo, ParameterSet,
};
use flhub_core::registry::{ContributionStatus, VersionId, VersionSelector};
use flhub_hub::api::ControlAction;
use flhub_hub::HubClient;

use common::*;

fn v(s: &str) -> VersionId {
    s.parse().unwrap()
}

#[test]
fn info_after_create() {
    let hub = spawn_memory();
    create(&hub, "mnist", 10);
    let info = participant(&hub, 1).info("mnist").unwrap();
    assert_eq!(info.head, VersionId::INITIAL);
    assert_eq!(info.versions.len(), 1);
    assert_eq!(info.classes, 10);

    create(&hub, "caltech-birds", 200);
    assert_eq!(manager(&hub).info("caltech-birds").unwrap().classes, 200);
    assert_eq!(
        manager(&hub).list_models().unwrap(),
        vec!["caltech-birds".to_string(), "mnist".to_string()]
    );
}

#[test]
fn missing_or_unknown_key_is_401() {
    let hub = spawn_memory();
    create(&hub, "mnist", 10);
    for key in [None, Some("not-a-real-key-at-all")] {
        let client = HubClient::new(&hub.url(), key);
        let err = client.info("mnist").unwrap_err();
        assert_eq!(err.status(), Some(401));
        assert_eq!(client.list_models().unwrap_err().status(), Some(401));
    }
}

#[test]
fn unknown_model_is_404() {
    let hub = spawn_memory();
    let client = manager(&hub);
    assert_eq!(
        client.info("nope").unwrap_err().code(),
        Some("model_not_found")
    );
    assert_eq!(client.status("nope").unwrap_err().status(), Some(404));
    let err = client.get_model("nope", VersionSelector::Head).unwrap_err();
    assert_eq!(err.status(), Some(404));
}

#[test]
fn downloads_are_canonical_and_stable() {
    let hub = spawn_memory();
    let (arch, params) = create(&hub, "mnist", 4);
    let client = participant(&hub, 1);
    let first = client.get_model("mnist", VersionSelector::Head).unwrap();
    let second = client
        .get_model("mnist", VersionSelector::Exact(VersionId::INITIAL))
        .unwrap();
    assert_eq!(first.version, VersionId::INITIAL);
    assert_eq!(first.bytes, second.bytes);
    assert_eq!(first.arch, arch);
    assert_eq!(first.params, params);
    let (a, p, c) = deserialize_model(&first.bytes).unwrap();
    assert_eq!(serialize_model(&a, &p, &c).unwrap(), first.bytes);

    let err = client
        .get_model("mnist", VersionSelector::Exact(v("1.0.1")))
        .unwrap_err();
    assert_eq!(err.code(), Some("version_not_found"));
}

#[test]
fn head_resolves_to_max_version() {
    let hub = spawn_memory();
    create(&hub, "mnist", 4);
    let m = manager(&hub);
    m.control(
        "mnist",
        &ControlAction::Branch {
            base_version: VersionId::INITIAL,
        },
    )
    .unwrap();
    let head = m.get_model("mnist", VersionSelector::Head).unwrap();
    assert_eq!(head.version, v("1.1.0"));
}

#[test]
fn push_records_contribution() {
    let hub = spawn_memory();
    let (_, params) = create(&hub, "mnist", 4);
    let resp = participant(&hub, 1)
        .push_result(
            "mnist",
            VersionId::INITIAL,
            &perturbed(&params, 1),
            6400,
            metrics(0.5),
        )
        .unwrap();
    assert_eq!(resp.head, VersionId::INITIAL);
    assert!(!resp.stale);
    let status = manager(&hub).status("mnist").unwrap();
    assert_eq!(status.status.pending.len(), 1);
    assert_eq!(status.status.pending[0].id, resp.id);
    assert_eq!(status.status.pending[0].sample_count, 6400);
    assert_eq!(status.status.pending[0].participant_id, "client-1");
}

#[test]
fn push_errors() {
    let hub = spawn_memory();
    let (_, params) = create(&hub, "mnist", 4);
    create(&hub, "other-model", 4);
    let client = participant(&hub, 1);

    let err = client
        .push_result("other-model", VersionId::INITIAL, &params, 10, metrics(0.5))
        .unwrap_err();
    assert_eq!(err.status(), Some(403));

    client
        .push_result("mnist", VersionId::INITIAL, &params, 10, metrics(0.5))
        .unwrap();
    let err = client
        .push_result("mnist", VersionId::INITIAL, &params, 10, metrics(0.5))
        .unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(409), Some("duplicate_contribution"))
    );

    let wrong = init_parameters(&small_arch(5), 1);
    let err = participant(&hub, 2)
        .push_result("mnist", VersionId::INITIAL, &wrong, 10, metrics(0.5))
        .unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(422), Some("shape_mismatch"))
    );

    let err = participant(&hub, 2)
        .push_result("mnist", v("1.4.0"), &params, 10, metrics(0.5))
        .unwrap_err();
    assert_eq!(err.status(), Some(404));

    let err = participant(&hub, 2)
        .push_result("nope", VersionId::INITIAL, &params, 10, metrics(0.5))
        .unwrap_err();
    assert_eq!(err.status(), Some(403));
}

#[test]
fn merge_matches_oracle_and_updates_status() {
    let hub = spawn_memory();
    let (_, params) = create(&hub, "mnist", 4);
    let pushes: Vec<(ParameterSet, u64)> = (1..=3)
        .map(|i| (perturbed(&params, i), 100 * i as u64 + 7))
        .collect();
    for (i, (p, n)) in pushes.iter().enumerate() {
        participant(&hub, i + 1)
            .push_result(
                "mnist",
                VersionId::INITIAL,
                p,
                *n,
                metrics(0.3 + i as f64 * 0.1),
            )
            .unwrap();
    }
    let m = manager(&hub);
    let status = m.status("mnist").unwrap();
    assert_eq!(status.status.pending.len(), 3);
    let json = serde_json::to_value(&status).unwrap();
    for c in json["pending"].as_array().unwrap() {
        assert!(c["metrics"]["train_accuracy"].is_number());
    }

    let resp = m
        .control("mnist", &ControlAction::merge(VersionId::INITIAL))
        .unwrap();
    assert_eq!(resp.head, v("1.0.1"));
    assert_eq!(resp.merged.len(), 3);

    let merged = m.get_model("mnist", VersionSelector::Head).unwrap();
    let oracle = oracle_mean(&pushes.iter().map(|(p, n)| (p, *n)).collect::<Vec<_>>());
    assert_eq!(flatten(&merged.params), oracle);

    let status = m.status("mnist").unwrap();
    assert!(status.status.pending.is_empty());
    assert!(status
        .status
        .contributions
        .iter()
        .all(|c| c.status == ContributionStatus::Merged));
}

#[test]
fn merge_preconditions() {
    let hub = spawn_memory();
    let (_, params) = create(&hub, "mnist", 4);
    let m = manager(&hub);
    m.control(
        "mnist",
        &ControlAction::Branch {
            base_version: VersionId::INITIAL,
        },
    )
    .unwrap();
    let err = m
        .control("mnist", &ControlAction::merge(VersionId::INITIAL))
        .unwrap_err();
    assert_eq!((err.status(), err.code()), (Some(409), Some("stale_base")));

    let err = m
        .control("mnist", &ControlAction::merge(v("1.1.0")))
        .unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(422), Some("empty_aggregation"))
    );

    participant(&hub, 1)
        .push_result("mnist", v("1.1.0"), &params, 10, metrics(0.5))
        .unwrap();
    let err = participant(&hub, 1)
        .control("mnist", &ControlAction::merge(v("1.1.0")))
        .unwrap_err();
    assert_eq!(err.status(), Some(403));

    let err = m
        .control(
            "mnist",
            &ControlAction::Merge {
                base_version: v("1.1.0"),
                contribution_ids: Some(vec!["client-9@1.1.0".into()]),
                policy: StalenessPolicy::LatestOnly,
            },
        )
        .unwrap_err();
    assert_eq!(err.status(), Some(404));
}

#[test]
fn explicit_selection_and_ignore() {
    let hub = spawn_memory();
    let (_, params) = create(&hub, "mnist", 4);
    let ids: Vec<String> = (1..=3)
        .map(|i| {
            participant(&hub, i)
                .push_result(
                    "mnist",
                    VersionId::INITIAL,
                    &perturbed(&params, i),
                    50,
                    metrics(0.5),
                )
                .unwrap()
                .id
        })
        .collect();
    let m = manager(&hub);
    let resp = m
        .control(
            "mnist",
            &ControlAction::Merge {
                base_version: VersionId::INITIAL,
                contribution_ids: Some(ids[..2].to_vec()),
                policy: StalenessPolicy::LatestOnly,
            },
        )
        .unwrap();
    assert_eq!(resp.merged, ids[..2].to_vec());
    let merged = m.get_model("mnist", VersionSelector::Head).unwrap();
    let p1 = perturbed(&params, 1);
    let p2 = perturbed(&params, 2);
    assert_eq!(
        flatten(&merged.params),
        oracle_mean(&[(&p1, 50), (&p2, 50)])
    );

    let err = m
        .control(
            "mnist",
            &ControlAction::Merge {
                base_version: v("1.0.1"),
                contribution_ids: Some(vec![ids[0].clone()]),
                policy: StalenessPolicy::LatestOnly,
            },
        )
        .unwrap_err();
    assert_eq!(err.code(), Some("contribution_not_pending"));

    m.control(
        "mnist",
        &ControlAction::Ignore {
            contribution_ids: vec![ids[2].clone()],
        },
    )
    .unwrap();
    let status = m.status("mnist").unwrap();
    assert!(status.status.pending.is_empty());
    assert_eq!(
        status.status.contributions[2].status,
        ContributionStatus::Ignored
    );
}

#[test]
fn staleness_policies() {
    for policy in [StalenessPolicy::LatestOnly, StalenessPolicy::RebranchOld] {
        let hub = spawn_memory();
        let (_, params) = create(&hub, "mnist", 4);
        let m = manager(&hub);
        m.control(
            "mnist",
            &ControlAction::Branch {
                base_version: VersionId::INITIAL,
            },
        )
        .unwrap();
        let stale = perturbed(&params, 9);
        let resp = participant(&hub, 3)
            .push_result("mnist", VersionId::INITIAL, &stale, 40, metrics(0.4))
            .unwrap();
        assert!(resp.stale);
        let fresh: Vec<ParameterSet> = (1..=2).map(|i| perturbed(&params, i)).collect();
        for (i, p) in fresh.iter().enumerate() {
            participant(&hub, i + 1)
                .push_result("mnist", v("1.1.0"), p, 60, metrics(0.6))
                .unwrap();
        }
        let resp = m
            .control(
                "mnist",
                &ControlAction::Merge {
                    base_version: v("1.1.0"),
                    contribution_ids: None,
                    policy,
                },
            )
            .unwrap();
        let fresh_merge = m
            .get_model("mnist", VersionSelector::Exact(v("1.1.1")))
            .unwrap();
        assert_eq!(
            flatten(&fresh_merge.params),
            oracle_mean(&[(&fresh[0], 60), (&fresh[1], 60)])
        );
        match policy {
            StalenessPolicy::LatestOnly => {
                assert_eq!(resp.head, v("1.1.1"));
                assert_eq!(resp.ignored, vec!["client-3@1.0.0".to_string()]);
            }
            StalenessPolicy::RebranchOld => {
                assert_eq!(resp.head, v("1.2.1"));
                let info = m.info("mnist").unwrap();
                assert_eq!(
                    info.versions,
                    vec![v("1.0.0"), v("1.1.0"), v("1.1.1"), v("1.2.0"), v("1.2.1")]
                );
                let rebranched = m.get_model("mnist", VersionSelector::Head).unwrap();
                assert_eq!(flatten(&rebranched.params), flatten(&stale));
                let status = m.status("mnist").unwrap();
                let branch = status
                    .status
                    .history
                    .iter()
                    .find(|r| r.version == v("1.2.0"))
                    .unwrap();
                assert_eq!(branch.parents[0].version, VersionId::INITIAL);
            }
        }
    }
}

#[test]
fn forks_through_control() {
    let hub = spawn_memory();
    let (_, params) = create(&hub, "mnist", 4);
    let m = manager(&hub);
    let resp = m
        .control(
            "mnist",
            &ControlAction::ForkAll {
                new_name: "mnist-copy".into(),
                source_version: None,
            },
        )
        .unwrap();
    assert_eq!(resp.head, VersionId::INITIAL);
    assert_eq!(
        m.get_model("mnist-copy", VersionSelector::Head)
            .unwrap()
            .params,
        params
    );
    m.control(
        "mnist",
        &ControlAction::ForkFeature {
            head_seed: 3,
            new_classes: 200,
            new_name: "caltech-birds".into(),
            source_version: Some(VersionId::INITIAL),
        },
    )
    .unwrap();
    let forked = m.get_model("caltech-birds", VersionSelector::Head).unwrap();
    assert_eq!(forked.arch.num_classes(), 200);
    assert_eq!(forked.params.layers[0], params.layers[0]);

    let err = m
        .control(
            "mnist",
            &ControlAction::ForkAll {
                new_name: "mnist-copy".into(),
                source_version: None,
            },
        )
        .unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(409), Some("model_exists"))
    );

    let other = HubClient::new(&hub.url(), Some(OTHER_MANAGER));
    let err = other
        .control(
            "mnist",
            &ControlAction::ForkAll {
                new_name: "other-copy".into(),
                source_version: None,
            },
        )
        .unwrap_err();
    assert_eq!(err.status(), Some(403));
}

#[test]
fn create_requires_manager_and_valid_body() {
    let hub = spawn_memory();
    let arch = small_arch(3);
    let params = init_parameters(&arch, 1);
    let compile = CompileInfo::sgd(0.1).unwrap();
    let err = participant(&hub, 1)
        .create_model("mnist", &arch, &params, &compile)
        .unwrap_err();
    assert_eq!(err.status(), Some(403));
    let err = HubClient::new(&hub.url(), Some(OTHER_MANAGER))
        .create_model("mnist", &arch, &params, &compile)
        .unwrap_err();
    assert_eq!(err.status(), Some(403));
    let m = manager(&hub);
    m.create_model("mnist", &arch, &params, &compile).unwrap();
    let err = m
        .create_model("mnist", &arch, &params, &compile)
        .unwrap_err();
    assert_eq!(err.status(), Some(409));
    let mut nan = params.clone();
    nan.layers[0].weights[0] = f32::NAN;
    let err = m
        .create_model("mnist-nan", &arch, &nan, &compile)
        .unwrap_err();
    assert_eq!(
        (err.status(), err.code()),
        (Some(422), Some("invalid_model"))
    );
}

#[test]
fn protocol_round_advances_head_by_one_micro() {
    let hub = spawn_memory();
    create(&hub, "mnist", 4);
    let m = manager(&hub);
    for round in 1..=3u32 {
        let head = m.info("mnist").unwrap().head;
        let branched = m
            .control("mnist", &ControlAction::Branch { base_version: head })
            .unwrap()
            .head;
        assert_eq!(branched, VersionId::new(1, round, 0));
        for i in 1..=3 {
            let client = participant(&hub, i);
            let model = client.get_model("mnist", VersionSelector::Head).unwrap();
            let trained = perturbed(&model.params, i + round as usize);
            client
                .push_result("mnist", model.version, &trained, 32, metrics(0.5))
                .unwrap();
        }
        let merged = m.control("mnist", &ControlAction::merge(branched)).unwrap();
        assert_eq!(merged.head, VersionId::new(1, round, 1));
        assert_eq!(
            m.get_model("mnist", VersionSelector::Head).unwrap().version,
            merged.head
        );
    }
}
