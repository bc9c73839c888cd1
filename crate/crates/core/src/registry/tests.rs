use std::io::Write;

use super::*;
use crate::aggregation::{fedavg, WeightedParams};
use crate::model::{init_parameters, Activation, LayerSpec};

fn arch(classes: usize) -> ModelArchitecture {
    ModelArchitecture::mlp(20, &[32, 16], classes).unwrap()
}

fn compile() -> CompileInfo {
    CompileInfo::sgd(0.05).unwrap()
}

fn create(reg: &Registry, name: &str, classes: usize) -> ModelVersionRecord {
    let a = arch(classes);
    reg.create_model(name, &a, &init_parameters(&a, 1), &compile())
        .unwrap()
}

fn push(
    reg: &Registry,
    name: &str,
    participant: &str,
    base: VersionId,
    seed: u64,
) -> Result<String> {
    let snap = reg.get_model(name, base.into())?;
    reg.submit_contribution(ContributionRequest {
        model_name: name.into(),
        base_version: base,
        params: init_parameters(&snap.arch, seed),
        sample_count: 100 * seed,
        metrics: TrainMetrics {
            train_accuracy: 0.5,
            train_loss: 1.0,
        },
        participant_id: participant.into(),
    })
}

fn v(major: u32, minor: u32, micro: u32) -> VersionId {
    VersionId::new(major, minor, micro)
}

#[test]
fn create_starts_at_one_and_rejects_duplicates() {
    let reg = Registry::in_memory();
    let rec = create(&reg, "fashion", 10);
    assert_eq!(rec.version, v(1, 0, 0));
    assert_eq!(rec.annotation, Annotation::Created);
    assert!(rec.parents.is_empty());
    let a = arch(10);
    let err = reg
        .create_model("fashion", &a, &init_parameters(&a, 2), &compile())
        .unwrap_err();
    assert_eq!(err.code(), "model_exists");
    let mut bad = init_parameters(&a, 2);
    bad.layers.pop();
    assert_eq!(
        reg.create_model("other", &a, &bad, &compile())
            .unwrap_err()
            .code(),
        "shape_mismatch"
    );
}

#[test]
fn table_three_models() {
    let reg = Registry::in_memory();
    for (name, classes) in [
        ("fashion-mnist", 10),
        ("cifar10", 10),
        ("caltech-birds", 200),
    ] {
        create(&reg, name, classes);
    }
    let classes: Vec<usize> = ["fashion-mnist", "cifar10", "caltech-birds"]
        .iter()
        .map(|n| {
            reg.get_model(n, VersionSelector::Head)
                .unwrap()
                .arch
                .num_classes()
        })
        .collect();
    assert_eq!(classes, [10, 10, 200]);
}

#[test]
fn branch_version_rules() {
    let reg = Registry::in_memory();
    create(&reg, "m", 3);
    let b = reg.create_branch("m", v(1, 0, 0)).unwrap();
    assert_eq!(b.version, v(1, 1, 0));
    assert_eq!(
        b.params_ref,
        reg.record("m", v(1, 0, 0)).unwrap().params_ref
    );
    assert_eq!(b.parents, vec![ParentRef::new("m", v(1, 0, 0))]);

    // walk the head to 1.4.2
    for minor in 2..=4 {
        let head = reg.head("m").unwrap();
        assert_eq!(
            reg.create_branch("m", head).unwrap().version,
            v(1, minor, 0)
        );
    }
    let params = reg.get_model("m", VersionSelector::Head).unwrap().params;
    reg.record_merge("m", v(1, 4, 0), &params, &[]).unwrap();
    reg.record_merge("m", v(1, 4, 1), &params, &[]).unwrap();
    assert_eq!(reg.head("m").unwrap(), v(1, 4, 2));
    assert_eq!(
        reg.create_branch("m", v(1, 4, 2)).unwrap().version,
        v(1, 5, 0)
    );
    assert_eq!(
        reg.create_branch("m", v(7, 0, 0)).unwrap_err().code(),
        "version_not_found"
    );
}

#[test]
fn branching_from_an_old_version_opens_a_new_head_line() {
    let reg = Registry::in_memory();
    create(&reg, "m", 3);
    reg.create_branch("m", v(1, 0, 0)).unwrap();
    reg.create_branch("m", v(1, 1, 0)).unwrap();
    let old = reg.create_branch("m", v(1, 0, 0)).unwrap();
    assert_eq!(old.version, v(1, 3, 0));
    assert_eq!(reg.head("m").unwrap(), v(1, 3, 0));
}

#[test]
fn fork_all_is_bit_identical() {
    let reg = Registry::in_memory();
    create(&reg, "fashion-mnist", 10);
    for _ in 0..50 {
        let head = reg.head("fashion-mnist").unwrap();
        reg.create_branch("fashion-mnist", head).unwrap();
    }
    assert_eq!(reg.head("fashion-mnist").unwrap(), v(1, 50, 0));
    let fork = reg
        .fork_all("fashion-mnist", v(1, 50, 0), "cifar10-forked")
        .unwrap();
    assert_eq!(fork.version, v(1, 0, 0));
    assert_eq!(fork.annotation, Annotation::ForkedAll);
    let src = reg.get_model("fashion-mnist", v(1, 50, 0).into()).unwrap();
    let dst = reg
        .get_model("cifar10-forked", VersionSelector::Head)
        .unwrap();
    assert_eq!(src.params.to_blob(), dst.params.to_blob());
    assert_eq!(src.arch, dst.arch);
    assert_eq!(src.compile, dst.compile);

    // lineage: fork -> source 1.50.0 -> ... -> 1.0.0
    let mut cursor = (fork.model_name.clone(), fork.version);
    let mut reached_source = false;
    while let Some(parent) = reg
        .record(&cursor.0, cursor.1)
        .unwrap()
        .parents
        .first()
        .cloned()
    {
        reached_source |= parent.model == "fashion-mnist";
        cursor = (parent.model, parent.version);
    }
    assert!(reached_source);
    assert_eq!(cursor, ("fashion-mnist".to_string(), v(1, 0, 0)));

    assert_eq!(
        reg.fork_all("fashion-mnist", v(1, 0, 0), "cifar10-forked")
            .unwrap_err()
            .code(),
        "model_exists"
    );
    assert_eq!(
        reg.fork_all("fashion-mnist", v(2, 0, 0), "x")
            .unwrap_err()
            .code(),
        "version_not_found"
    );
}

#[test]
fn feature_fork_rebuilds_the_head() {
    let reg = Registry::in_memory();
    create(&reg, "cifar10", 10);
    let rec = reg
        .fork_feature_only("cifar10", v(1, 0, 0), "caltech-birds", 200, 42)
        .unwrap();
    assert_eq!(rec.annotation, Annotation::ForkedFeature);
    let src = reg.get_model("cifar10", VersionSelector::Head).unwrap();
    let dst = reg
        .get_model("caltech-birds", VersionSelector::Head)
        .unwrap();
    assert_eq!(dst.params.layers.last().unwrap().bias.len(), 200);
    assert_eq!(dst.arch.num_classes(), 200);
    let boundary = src.arch.prediction_boundary();
    for l in 0..boundary {
        assert_eq!(
            ParameterSet::new(vec![src.params.layers[l].clone()]).to_blob(),
            ParameterSet::new(vec![dst.params.layers[l].clone()]).to_blob()
        );
    }
    let expected_head = init_parameters(&dst.arch, 42);
    assert_eq!(
        dst.params.layers[boundary..],
        expected_head.layers[boundary..]
    );

    // same class count: features equal, head reinitialized
    reg.fork_feature_only("cifar10", v(1, 0, 0), "cifar10-again", 10, 42)
        .unwrap();
    let same = reg
        .get_model("cifar10-again", VersionSelector::Head)
        .unwrap();
    assert_eq!(
        same.params.layers[..boundary],
        src.params.layers[..boundary]
    );
    assert_ne!(
        same.params.layers[boundary..],
        src.params.layers[boundary..]
    );
}

#[test]
fn feature_fork_with_boundary_zero_reinitializes_everything() {
    let reg = Registry::in_memory();
    let a = ModelArchitecture::new(
        4,
        vec![
            LayerSpec::new(4, 6, Activation::Relu),
            LayerSpec::new(6, 3, Activation::Softmax),
        ],
        0,
    )
    .unwrap();
    reg.create_model("flat", &a, &init_parameters(&a, 1), &compile())
        .unwrap();
    reg.fork_feature_only("flat", v(1, 0, 0), "flat-5", 5, 9)
        .unwrap();
    let dst = reg.get_model("flat-5", VersionSelector::Head).unwrap();
    assert_eq!(dst.params, init_parameters(&dst.arch, 9));
}

#[test]
fn contributions_dedup_and_validate() {
    let reg = Registry::in_memory();
    create(&reg, "fashion", 10);
    reg.create_branch("fashion", v(1, 0, 0)).unwrap();
    for (i, p) in ["c1", "c2", "c3"].iter().enumerate() {
        push(&reg, "fashion", p, v(1, 1, 0), i as u64 + 1).unwrap();
    }
    let status = reg.get_status("fashion").unwrap();
    assert_eq!(status.pending.len(), 3);
    assert!(status
        .pending
        .iter()
        .all(|c| c.metrics.train_accuracy == 0.5));
    assert_eq!(
        push(&reg, "fashion", "c1", v(1, 1, 0), 9)
            .unwrap_err()
            .code(),
        "duplicate_contribution"
    );
    assert_eq!(
        push(&reg, "fashion", "c1", v(9, 9, 9), 9)
            .unwrap_err()
            .code(),
        "version_not_found"
    );
    let mut bad = init_parameters(&arch(10), 1);
    bad.layers[0].bias.push(0.0);
    let err = reg
        .submit_contribution(ContributionRequest {
            model_name: "fashion".into(),
            base_version: v(1, 1, 0),
            params: bad,
            sample_count: 5,
            metrics: TrainMetrics::default(),
            participant_id: "c9".into(),
        })
        .unwrap_err();
    assert_eq!(err.code(), "shape_mismatch");
}

#[test]
fn merge_rules() {
    let reg = Registry::in_memory();
    create(&reg, "m", 4);
    reg.create_branch("m", v(1, 0, 0)).unwrap();
    let id = push(&reg, "m", "p", v(1, 1, 0), 3).unwrap();
    let params = reg.contribution_params("m", &id).unwrap();
    assert_eq!(
        reg.record_merge("m", v(1, 0, 0), &params, std::slice::from_ref(&id))
            .unwrap_err()
            .code(),
        "stale_base"
    );
    let rec = reg
        .record_merge("m", v(1, 1, 0), &params, std::slice::from_ref(&id))
        .unwrap();
    assert_eq!(rec.version, v(1, 1, 1));
    assert_eq!(rec.annotation, Annotation::Merged);
    assert_eq!(
        reg.get_status("m").unwrap().contributions[0].status,
        ContributionStatus::Merged
    );
    assert_eq!(
        reg.record_merge("m", v(1, 1, 1), &params, std::slice::from_ref(&id))
            .unwrap_err()
            .code(),
        "contribution_not_pending"
    );
    assert_eq!(
        reg.mark_ignored("m", &[id]).unwrap_err().code(),
        "contribution_not_pending"
    );
}

#[test]
fn fifty_rounds_reach_1_50_1() {
    let reg = Registry::in_memory();
    create(&reg, "m", 3);
    let mut merges = 0;
    let mut branches = 0;
    for _ in 0..50 {
        let head = reg.head("m").unwrap();
        let b = reg.create_branch("m", head).unwrap();
        branches += 1;
        let params = reg.get_model("m", VersionSelector::Head).unwrap().params;
        reg.record_merge("m", b.version, &params, &[]).unwrap();
        merges += 1;
    }
    assert_eq!(reg.head("m").unwrap(), v(1, 50, 1));
    let history = reg.get_status("m").unwrap().history;
    assert_eq!(history.len(), 1 + branches + merges);
    assert_eq!(
        history
            .iter()
            .filter(|r| r.annotation == Annotation::Merged)
            .count(),
        merges
    );
}

#[test]
fn ignore_then_merge_excludes_ignored() {
    let reg = Registry::in_memory();
    create(&reg, "m", 3);
    reg.create_branch("m", v(1, 0, 0)).unwrap();
    let ids: Vec<String> = (1..=5)
        .map(|i| push(&reg, "m", &format!("p{i}"), v(1, 1, 0), i).unwrap())
        .collect();
    assert_eq!(reg.mark_ignored("m", &ids[..2]).unwrap(), 2);
    let status = reg.get_status("m").unwrap();
    assert_eq!(status.pending.len(), 3);

    let inputs: Vec<WeightedParams> = status
        .pending
        .iter()
        .map(|c| {
            WeightedParams::new(
                c.id.clone(),
                reg.contribution_params("m", &c.id).unwrap(),
                c.sample_count,
            )
        })
        .collect();
    let merged = fedavg(&inputs).unwrap();
    let fresh_ids: Vec<String> = status.pending.iter().map(|c| c.id.clone()).collect();
    reg.record_merge("m", v(1, 1, 0), &merged, &fresh_ids)
        .unwrap();

    // oracle over the three fresh pushes only
    let fresh: Vec<(ParameterSet, u64)> = (3..=5)
        .map(|i| (init_parameters(&arch(3), i), 100 * i))
        .collect();
    let total: u64 = fresh.iter().map(|f| f.1).sum();
    let head = reg.get_model("m", VersionSelector::Head).unwrap().params;
    for (l, layer) in head.layers.iter().enumerate() {
        for (i, &value) in layer.weights.iter().enumerate() {
            let expected: f64 = fresh
                .iter()
                .map(|(p, n)| *n as f64 / total as f64 * p.layers[l].weights[i] as f64)
                .sum();
            assert!((value as f64 - expected).abs() < 1e-6);
        }
    }
    let status = reg.get_status("m").unwrap();
    assert!(status.pending.is_empty());
    assert_eq!(
        status
            .contributions
            .iter()
            .filter(|c| c.status == ContributionStatus::Ignored)
            .count(),
        2
    );
}

#[test]
fn rebranch_merges_old_contributions() {
    let reg = Registry::in_memory();
    create(&reg, "m", 3);
    let stale = push(&reg, "m", "late", v(1, 0, 0), 2).unwrap();
    let params = reg.contribution_params("m", &stale).unwrap();
    let current = reg.get_model("m", VersionSelector::Head).unwrap().params;
    reg.create_branch("m", v(1, 0, 0)).unwrap();
    reg.record_merge("m", v(1, 1, 0), &current, &[]).unwrap();
    reg.create_branch("m", v(1, 1, 1)).unwrap();
    // 1.2.0 was branched from 1.1.1, so a 1.0.0-based result does not fit
    assert_eq!(
        reg.record_merge("m", v(1, 2, 0), &params, std::slice::from_ref(&stale))
            .unwrap_err()
            .code(),
        "invalid_argument"
    );
    let branch = reg.create_branch("m", v(1, 0, 0)).unwrap();
    assert_eq!(branch.version, v(1, 3, 0));
    let rec = reg
        .record_merge("m", v(1, 3, 0), &params, &[stale])
        .unwrap();
    assert_eq!(rec.version, v(1, 3, 1));
    assert!(rec.parents.contains(&ParentRef::new("m", v(1, 0, 0))));
}

#[test]
fn get_model_and_status_basics() {
    let reg = Registry::in_memory();
    let a = arch(3);
    let p = init_parameters(&a, 77);
    reg.create_model("m", &a, &p, &compile()).unwrap();
    let snap = reg.get_model("m", VersionSelector::Head).unwrap();
    assert_eq!(snap.version, v(1, 0, 0));
    assert_eq!(snap.params.to_blob(), p.to_blob());
    assert_eq!(
        reg.get_model("nope", VersionSelector::Head)
            .unwrap_err()
            .code(),
        "model_not_found"
    );
    assert_eq!(
        reg.get_model("m", v(1, 1, 0).into()).unwrap_err().code(),
        "version_not_found"
    );
    assert!(reg.get_status("m").unwrap().pending.is_empty());
    reg.create_branch("m", v(1, 0, 0)).unwrap();
    reg.record_merge("m", v(1, 1, 0), &p, &[]).unwrap();
    let versions: Vec<VersionId> = reg
        .get_status("m")
        .unwrap()
        .history
        .iter()
        .map(|r| r.version)
        .collect();
    assert_eq!(versions, [v(1, 0, 0), v(1, 1, 0), v(1, 1, 1)]);
    assert_eq!(reg.get_status("x").unwrap_err().code(), "model_not_found");
}

#[test]
fn disk_replay_matches_live_state() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    create(&reg, "src", 10);
    reg.create_branch("src", v(1, 0, 0)).unwrap();
    push(&reg, "src", "a", v(1, 1, 0), 1).unwrap();
    push(&reg, "src", "b", v(1, 1, 0), 2).unwrap();
    reg.fork_feature_only("src", v(1, 1, 0), "dst", 20, 3)
        .unwrap();
    reg.fork_all("src", v(1, 0, 0), "copy").unwrap();
    let live = reg.snapshot();
    let events = reg.events();
    drop(reg);

    let reopened = Registry::open(dir.path()).unwrap();
    assert_eq!(reopened.snapshot(), live);
    assert_eq!(reopened.events(), events);
    assert_eq!(RegistryState::replay(&events).unwrap(), live);
    assert_eq!(reopened.get_status("src").unwrap().pending.len(), 2);

    let line = std::fs::read_to_string(dir.path().join("src").join("events.ndjson")).unwrap();
    let first = line.lines().next().unwrap();
    assert!(first.starts_with(r#"{"kind":"create","payload":{"annotation":"created","arch_ref":"#));
    assert!(first.ends_with(r#""sequence_no":1}"#));
}

#[test]
fn torn_trailing_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    {
        let reg = Registry::open(dir.path()).unwrap();
        create(&reg, "m", 3);
        reg.create_branch("m", v(1, 0, 0)).unwrap();
    }
    let path = dir.path().join("m").join("events.ndjson");
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap();
    f.write_all(br#"{"kind":"branch","payload":{"annot"#)
        .unwrap();
    drop(f);
    let reg = Registry::open(dir.path()).unwrap();
    assert_eq!(reg.head("m").unwrap(), v(1, 1, 0));
    // appending after recovery still yields a readable log
    reg.create_branch("m", v(1, 1, 0)).unwrap();
    drop(reg);
    assert_eq!(
        Registry::open(dir.path()).unwrap().head("m").unwrap(),
        v(1, 2, 0)
    );
}

#[test]
fn empty_data_dir_has_no_models() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Registry::open(dir.path()).unwrap().list_models().is_empty());
}
