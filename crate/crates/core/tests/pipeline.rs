use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use trajkd_core::benchmark::{generate, Benchmark, BenchmarkConfig};
use trajkd_core::evaluation::{compare_kdbs, CompareLevel};
use trajkd_core::fcm::FcmConfig;
use trajkd_core::features::{FeatureKind, FeatureSpec};
use trajkd_core::filters::{Comparator, FilterSpec, SpatialStatistic};
use trajkd_core::kdb::{KnowledgeDatabase, Placement};
use trajkd_core::pipeline::*;
use trajkd_core::trajectory::{Axis, DatabaseMeta, ObjectDatabase, Point3, Trajectory};

fn small_benchmark(seed: u64, sigma: f64) -> Benchmark {
    let cfg = BenchmarkConfig {
        n_objects: 160,
        n_frames: 120,
        ..BenchmarkConfig::default().with_noise(sigma).with_seed(seed)
    };
    generate(&cfg).unwrap()
}

fn y_filter(value: f64) -> FilterSpec {
    FilterSpec::SpatialThreshold {
        axis: Axis::Y,
        comparator: Comparator::Ge,
        value,
        statistic: SpatialStatistic::Centroid,
    }
}

fn filter_step(value: f64, output: &str) -> Step {
    Step::new(
        "",
        StepKind::Filter {
            input: Input::Unassigned,
            filter: y_filter(value),
            output: Some(output.into()),
            rejected_group: None,
        },
    )
}

fn cluster_step(input: &str, c: usize, names: &[&str]) -> Step {
    Step::new(
        "",
        StepKind::Cluster {
            input: Input::group(input),
            features: vec![FeatureSpec::new(FeatureKind::StartPoint)],
            config: FcmConfig::new(c, 3),
            names: names.iter().map(|s| s.to_string()).collect(),
            output: ClusterOutput::Subgroups,
        },
    )
}

/// Nine stationary objects in three well separated clumps along x.
fn clumps() -> Arc<ObjectDatabase> {
    let mut trajs = Vec::new();
    for (c, x) in [0.0, 10.0, 20.0].iter().enumerate() {
        for k in 0..3 {
            let p = Point3::new(x + k as f64 * 0.1, 1.0, 0.0);
            trajs.push(Trajectory::from_positions(format!("c{c}o{k}"), 0, [p, p]).unwrap());
        }
    }
    Arc::new(ObjectDatabase::new("clumps", trajs, DatabaseMeta::default()).unwrap())
}

fn three_way(session: &mut Session) {
    session.commit(filter_step(0.0, "all")).unwrap();
    session.commit(cluster_step("all", 3, &["a", "b", "c"])).unwrap();
}

fn sizes(kdb: &KnowledgeDatabase) -> BTreeMap<String, usize> {
    kdb.leaf_groups().into_iter().map(|(g, m)| (g, m.len())).collect()
}

#[test]
fn filter_on_fresh_session_leaves_complement_unassigned() {
    let b = small_benchmark(1, 0.1);
    let mut s = Session::new(Arc::new(b.db.clone()));
    let report = s.commit(filter_step(0.0, "selected")).unwrap();
    let kdb = s.finalize();
    let groups = kdb.leaf_groups();
    assert_eq!(groups.keys().collect::<Vec<_>>(), ["selected"]);
    assert_eq!(groups["selected"].len() + kdb.unassigned.len(), b.db.len());
    assert_eq!(report.outputs["selected"], groups["selected"].len());
    assert!(kdb.excluded.is_empty());
    assert!(kdb.check_partition(&b.db).is_empty());
}

#[test]
fn side_clustering_separates_halves() {
    let b = small_benchmark(2, 0.1);
    let mut s = Session::new(Arc::new(b.db.clone()));
    s.commit(filter_step(0.0, "upper")).unwrap();
    s.commit(cluster_step("upper", 2, &["left", "right"])).unwrap();
    let kdb = s.finalize();
    for (id, path) in &kdb.groups {
        let x = b.seeds[id].x;
        assert_eq!(path == "upper/left", x < 0.0, "{id} at x={x} went to {path}");
    }
}

#[test]
fn merge_is_set_union() {
    let mut s = Session::new(clumps());
    three_way(&mut s);
    let before = s.finalize();
    let a: BTreeSet<_> = before.leaf_groups()["all/a"].clone();
    let b: BTreeSet<_> = before.leaf_groups()["all/b"].clone();
    s.commit(Step::new(
        "",
        StepKind::Merge {
            groups: vec!["all/a".into(), "all/b".into()],
            name: "ab".into(),
        },
    ))
    .unwrap();
    let after = s.finalize().leaf_groups();
    assert_eq!(after["all/ab"], a.union(&b).cloned().collect());
    assert!(!after.contains_key("all/a"));
}

#[test]
fn merge_then_dissolve_conserves_total() {
    let mut s = Session::new(clumps());
    three_way(&mut s);
    s.commit(Step::new(
        "",
        StepKind::Merge {
            groups: vec!["all/a".into(), "all/b".into()],
            name: "ab".into(),
        },
    ))
    .unwrap();
    s.commit(Step::new("", StepKind::Dissolve { group: "all/ab".into() })).unwrap();
    let kdb = s.finalize();
    assert_eq!(sizes(&kdb), BTreeMap::from([("all/c".to_string(), 9)]));
    assert!(kdb.check_partition(s.db()).is_empty());
}

#[test]
fn dissolve_sends_members_to_nearest_sibling() {
    let mut s = Session::new(clumps());
    three_way(&mut s);
    s.commit(Step::new("", StepKind::Dissolve { group: "all/b".into() })).unwrap();
    let kdb = s.finalize();
    // the middle clump is equidistant up to the 0.1 spread; every member must land in a or c
    assert_eq!(kdb.groups.len(), 9);
    assert!(kdb.groups.values().all(|g| g == "all/a" || g == "all/c"));
    assert_eq!(kdb.provenance["c1o0"], "s3");
}

#[test]
fn dissolve_without_siblings_is_an_error() {
    let mut s = Session::new(clumps());
    s.commit(filter_step(0.0, "all")).unwrap();
    let err = s.commit(Step::new("", StepKind::Dissolve { group: "all".into() })).unwrap_err();
    assert_eq!(err.code(), "no_redistribution_target");
    assert_eq!(s.record().steps.len(), 1);
}

#[test]
fn exclude_moves_exactly_the_named_groups() {
    let mut s = Session::new(clumps());
    three_way(&mut s);
    let before = s.finalize();
    s.commit(Step::new(
        "",
        StepKind::Exclude {
            groups: vec!["all/a".into(), "all/c".into()],
        },
    ))
    .unwrap();
    let after = s.finalize();
    let expected: BTreeSet<_> = before.leaf_groups()["all/a"].union(&before.leaf_groups()["all/c"]).cloned().collect();
    assert_eq!(after.excluded, expected);
    assert_eq!(after.leaf_groups()["all/b"], before.leaf_groups()["all/b"]);
}

#[test]
fn split_recluster_creates_children() {
    let mut s = Session::new(clumps());
    s.commit(filter_step(0.0, "all")).unwrap();
    s.commit(cluster_step("all", 2, &[])).unwrap();
    let leaves = s.grouping().leaves();
    let (big, _) = leaves.iter().max_by_key(|(_, n)| **n).unwrap();
    let big = big.clone();
    s.commit(Step::new(
        "",
        StepKind::SplitRecluster {
            group: big.clone(),
            features: vec![FeatureSpec::new(FeatureKind::StartPoint)],
            config: FcmConfig::new(2, 5),
            names: vec![],
        },
    ))
    .unwrap();
    let leaves = s.grouping().leaves();
    assert!(leaves.contains_key(&format!("{big}/c0")) && leaves.contains_key(&format!("{big}/c1")));
    assert!(!leaves.contains_key(&big));
}

#[test]
fn modifications_require_leaves() {
    let mut s = Session::new(clumps());
    three_way(&mut s);
    let err = s.commit(Step::new("", StepKind::Exclude { groups: vec!["all".into()] })).unwrap_err();
    assert_eq!(err.code(), "not_a_leaf");
    let err = s.commit(Step::new("", StepKind::Exclude { groups: vec!["nope".into()] })).unwrap_err();
    assert_eq!(err.code(), "broken_reference");
}

#[test]
fn cluster_name_count_must_match() {
    let mut s = Session::new(clumps());
    s.commit(filter_step(0.0, "all")).unwrap();
    let err = s.commit(cluster_step("all", 3, &["a", "b"])).unwrap_err();
    assert_eq!(err.code(), "invalid_step");
}

#[test]
fn empty_input_is_an_error_on_commit() {
    let mut s = Session::new(clumps());
    s.commit(filter_step(0.0, "all")).unwrap();
    // nothing left unassigned
    let err = s.commit(filter_step(0.0, "again")).unwrap_err();
    assert_eq!(err.code(), "empty_input");
}

#[test]
fn output_names_must_not_clash() {
    let mut s = Session::new(clumps());
    s.commit(Step::new(
        "",
        StepKind::Filter {
            input: Input::Unassigned,
            filter: FilterSpec::SpatialThreshold {
                axis: Axis::X,
                comparator: Comparator::Le,
                value: 5.0,
                statistic: SpatialStatistic::Centroid,
            },
            output: Some("g".into()),
            rejected_group: None,
        },
    ))
    .unwrap();
    let err = s.commit(filter_step(0.0, "g")).unwrap_err();
    assert_eq!(err.code(), "name_collision");
}

#[test]
fn commit_then_undo_restores_grouping() {
    let b = small_benchmark(3, 0.1);
    let mut s = Session::new(Arc::new(b.db.clone()));
    s.commit(filter_step(0.0, "upper")).unwrap();
    let before = s.finalize();
    s.commit(cluster_step("upper", 2, &["left", "right"])).unwrap();
    s.undo().unwrap();
    assert_eq!(s.finalize(), before);
    assert_eq!(s.revision(), 3);
}

#[test]
fn undo_matches_replay_of_truncated_record() {
    let b = small_benchmark(4, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let db = Arc::new(b.db.clone());
    let mut s = Session::from_record(db.clone(), &record).unwrap();
    assert_eq!(s.record().steps.len(), 4);
    s.undo().unwrap();
    let mut truncated = record.clone();
    truncated.steps.pop();
    let replayed = replay(&truncated, &db, &ReplayOptions::default()).unwrap();
    assert_eq!(s.finalize(), replayed.kdb);
}

#[test]
fn undo_on_fresh_session_is_an_error() {
    let mut s = Session::new(clumps());
    assert_eq!(s.undo().unwrap_err(), PipelineError::NothingToUndo);
}

#[test]
fn empty_session_finalizes_to_all_unassigned() {
    let db = clumps();
    let s = Session::new(db.clone());
    let kdb = s.finalize();
    assert_eq!(kdb.unassigned.len(), db.len());
    assert_eq!(kdb, s.finalize());
}

#[test]
fn example_pipeline_finds_six_groups() {
    let b = small_benchmark(5, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let s = Session::from_record(Arc::new(b.db.clone()), &record).unwrap();
    let kdb = s.finalize();
    let groups: Vec<String> = kdb.leaf_groups().into_keys().collect();
    assert_eq!(
        groups,
        [
            "upper/left/deep/forward",
            "upper/left/deep/outward",
            "upper/left/surface",
            "upper/right/deep/forward",
            "upper/right/deep/outward",
            "upper/right/surface"
        ]
    );
    let cmp = compare_kdbs(&kdb, &b.truth, CompareLevel::Leaf).unwrap();
    assert_eq!(cmp.agreement, 1.0);
}

#[test]
fn replay_on_same_data_is_bit_identical() {
    let b = small_benchmark(6, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let s = Session::from_record(Arc::new(b.db.clone()), &record).unwrap();
    let one = replay(s.record(), &b.db, &ReplayOptions::default()).unwrap();
    let two = replay(s.record(), &b.db, &ReplayOptions::default()).unwrap();
    assert_eq!(one.kdb.to_csv_bytes(), two.kdb.to_csv_bytes());
    assert_eq!(one.kdb, s.finalize());
    assert_eq!(one.kdb.to_json().unwrap(), s.finalize().to_json().unwrap());
}

#[test]
fn pending_replay_on_new_data_leaves_manual_input_unassigned() {
    let a = small_benchmark(7, 0.1);
    let record = example_pipeline(a.db.db_id(), example_labels_from_truth(&a.truth));
    let b = small_benchmark(8, 0.1);
    let out = replay(
        &record,
        &b.db,
        &ReplayOptions {
            overrides: vec![],
            manual_policy: ManualPolicy::Pending,
        },
    )
    .unwrap();
    assert_eq!(out.report.steps[3].status, StepStatus::Pending);
    assert!(out.report.steps[..3].iter().all(|s| s.status == StepStatus::Applied));
    let groups = out.kdb.leaf_groups();
    assert!(groups.keys().all(|g| g.ends_with("/surface")));
    // truth with the manual level folded into unassigned
    let mut folded = b.truth.clone();
    for (id, path) in &b.truth.groups {
        if path.contains("/deep/") {
            folded.insert(id.clone(), Placement::Unassigned, None);
        }
    }
    let cmp = compare_kdbs(&out.kdb, &folded, CompareLevel::Leaf).unwrap();
    assert!(cmp.agreement >= 0.95, "agreement {}", cmp.agreement);
}

#[test]
fn by_id_replay_on_new_data_reports_unmatched_labels() {
    let a = small_benchmark(9, 0.1);
    let record = example_pipeline(a.db.db_id(), example_labels_from_truth(&a.truth));
    let mut b = small_benchmark(10, 0.1);
    b.db = b.db.clone().with_db_id("other");
    let out = replay(&record, &b.db, &ReplayOptions::default()).unwrap();
    let manual = &out.report.steps[3];
    assert_eq!(manual.status, StepStatus::Applied);
    // ids coincide across benchmarks, but group membership does not
    assert!(!manual.unmatched_labels.is_empty());
}

#[test]
fn threshold_override_changes_step_one_counts_monotonically() {
    let b = small_benchmark(11, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let mut last = usize::MAX;
    for t in [-150.0, -50.0, 0.0, 50.0, 100.0] {
        let ov = StepOverride::parse(&format!("s1=filter.value:{t}")).unwrap();
        let out = replay(
            &record,
            &b.db,
            &ReplayOptions {
                overrides: vec![ov],
                manual_policy: ManualPolicy::ById,
            },
        )
        .unwrap();
        let selected = out.report.steps[0].outputs.get("upper").copied().unwrap_or(0);
        assert!(selected <= last);
        last = selected;
        let downstream: usize = out.kdb.groups.len();
        assert!(downstream <= selected);
    }
}

#[test]
fn overrides_reject_unknown_steps_and_keys() {
    let b = small_benchmark(12, 0.1);
    let record = example_pipeline(b.db.db_id(), BTreeMap::new());
    for text in ["s9=filter.value:1", "s1=filter.nope:1", "s1=filter.value:\"x\""] {
        let ov = StepOverride::parse(text).unwrap();
        assert!(apply_overrides(&record, &[ov]).is_err(), "{text}");
    }
    assert!(StepOverride::parse("s1filter.value").is_err());
    let ov = StepOverride::parse("s3=config.seed:99").unwrap();
    let patched = apply_overrides(&record, &[ov]).unwrap();
    assert!(matches!(&patched.steps[2].action, StepKind::Cluster { config, .. } if config.seed == 99));
}

#[test]
fn skipped_steps_propagate_downstream() {
    let b = small_benchmark(13, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    // a threshold above everything empties `upper`
    let ov = StepOverride::parse("s1=filter.value:1e6").unwrap();
    let out = replay(
        &record,
        &b.db,
        &ReplayOptions {
            overrides: vec![ov],
            manual_policy: ManualPolicy::ById,
        },
    )
    .unwrap();
    let status: Vec<StepStatus> = out.report.steps.iter().map(|s| s.status).collect();
    assert_eq!(status, [StepStatus::Applied, StepStatus::Skipped, StepStatus::Skipped, StepStatus::Skipped]);
    assert_eq!(out.report.skipped().count(), 3);
    assert_eq!(out.kdb.unassigned.len(), b.db.len());
}

#[test]
fn inserting_a_pass_all_filter_changes_nothing() {
    let b = small_benchmark(14, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let base = replay(&record, &b.db, &ReplayOptions::default()).unwrap().kdb;
    for (pos, input) in [(0, Input::Unassigned), (2, Input::group("upper")), (4, Input::group("upper/deep"))] {
        let noop = Step::new(
            "noop",
            StepKind::Filter {
                input,
                filter: FilterSpec::pass_all(),
                output: None,
                rejected_group: None,
            },
        );
        let patched = insert_step(&record, pos, noop).unwrap();
        let kdb = replay(&patched, &b.db, &ReplayOptions::default()).unwrap().kdb;
        assert_eq!(kdb.groups, base.groups);
        assert_eq!(kdb.unassigned, base.unassigned);
        assert_eq!(kdb.provenance, base.provenance);
        assert_ne!(kdb.pipeline_hash, base.pipeline_hash);
    }
}

#[test]
fn inserting_at_end_equals_commit() {
    let db = clumps();
    let mut record = PipelineRecord::new(db.db_id());
    record = insert_step(&record, 0, filter_step(0.0, "all")).unwrap();
    let appended = insert_step(&record, 1, cluster_step("all", 3, &["a", "b", "c"])).unwrap();
    let mut s = Session::from_record(db.clone(), &record).unwrap();
    s.commit(cluster_step("all", 3, &["a", "b", "c"])).unwrap();
    assert_eq!(s.record(), &appended);
    assert_eq!(replay(&appended, &db, &ReplayOptions::default()).unwrap().kdb, s.finalize());
}

#[test]
fn inserting_a_consumer_before_its_producer_fails() {
    let b = small_benchmark(15, 0.1);
    let record = example_pipeline(b.db.db_id(), BTreeMap::new());
    let err = insert_step(&record, 0, cluster_step("upper", 2, &[])).unwrap_err();
    assert_eq!(
        err,
        PipelineError::BrokenReference {
            step_id: "s5".into(),
            group: "upper".into()
        }
    );
}

#[test]
fn preview_matches_commit_and_never_mutates() {
    let b = small_benchmark(16, 0.1);
    let mut s = Session::new(Arc::new(b.db.clone()));
    s.commit(filter_step(0.0, "upper")).unwrap();
    let step = cluster_step("upper", 2, &["left", "right"]);
    let before = s.finalize();
    let preview = s.preview(step.clone()).unwrap();
    assert_eq!(s.finalize(), before);
    assert_eq!(preview.revision, s.revision());
    let cluster = preview.cluster.as_ref().unwrap();
    assert_eq!(cluster.clusters.iter().map(|c| c.size).sum::<usize>(), preview.report.input_size);
    s.commit(step).unwrap();
    assert_eq!(s.grouping().view(), preview.grouping);
}

#[test]
fn manual_label_toggle_round_trip() {
    let mut s = Session::new(clumps());
    s.commit(filter_step(0.0, "all")).unwrap();
    let report = s
        .commit(Step::new(
            "",
            StepKind::ManualLabel {
                input: Input::group("all"),
                labels: BTreeMap::from([("c0o1".to_string(), "picked".to_string()), ("ghost".to_string(), "x".to_string())]),
                default_group: Some("rest".into()),
            },
        ))
        .unwrap();
    assert_eq!(report.unmatched_labels, ["ghost"]);
    let view = s.grouping().view();
    assert_eq!(view.groups["all/picked"], ["c0o1"]);
    assert_eq!(view.groups["all/rest"].len(), 8);
}

#[test]
fn record_json_round_trip_and_digest() {
    let b = small_benchmark(17, 0.1);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let back = PipelineRecord::from_json(&record.to_json()).unwrap();
    assert_eq!(back, record);
    assert_eq!(back.digest(), record.digest());
    assert_eq!(record.digest().len(), 64);
    let mut other = record.clone();
    other.steps[0].annotation.push('!');
    assert_ne!(other.digest(), record.digest());
}

#[test]
fn tag_scope_splices_side_below_scope() {
    let b = small_benchmark(18, 0.0);
    let record = example_pipeline(b.db.db_id(), example_labels_from_truth(&b.truth));
    let s = Session::from_record(Arc::new(b.db.clone()), &record).unwrap();
    let view = s.grouping().view();
    // tags are not part of the live tree
    assert!(view.groups.keys().all(|g| !g.contains("left") && !g.contains("right")));
    assert_eq!(view.tags["upper"].keys().collect::<Vec<_>>(), ["left", "right"]);
}
