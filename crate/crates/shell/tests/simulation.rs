use std::sync::Arc;

use proptest::prelude::*;
use townhall::sim::{simulate, simulation_engine, BotPolicy, CountDistribution};
use townhall_core::analytics::report::ReportError;
use townhall_core::study::lausanne_fixture;
use townhall_core::{build_report, DemographicStore, ReportOptions, ResponseStore};

fn run(seed: u64, bots: usize) -> (Vec<townhall_core::ResponseRecord>, String) {
    let study = Arc::new(lausanne_fixture());
    let engine = simulation_engine(study.clone(), Arc::new(ResponseStore::in_memory()), seed);
    let demo = DemographicStore::in_memory();
    let summary = simulate(&engine, Some(&demo), bots, &BotPolicy::calibrated(seed)).unwrap();
    assert_eq!(summary.completed.len(), bots);
    assert!(summary.failed.is_empty());
    assert_eq!(demo.records().unwrap().len(), bots);
    let records = engine.store().responses().unwrap();
    let options = ReportOptions { resamples: 500, ..ReportOptions::default() };
    let report = build_report(&study, &records, &engine.store().audit_records().unwrap(), &options)
        .map(|r| r.to_json())
        .unwrap_or_default();
    (records, report)
}

#[test]
fn calibrated_means() {
    let p = BotPolicy::calibrated(1);
    assert!((p.chat_questions["flo"].mean() - 3.2).abs() < 1e-12);
    assert!((p.chat_questions["gustavo"].mean() - 5.5).abs() < 1e-12);
    p.validate().unwrap();
}

#[test]
fn same_seed_same_pipeline_output() {
    let (a_records, a_report) = run(11, 12);
    let (b_records, b_report) = run(11, 12);
    assert_eq!(a_records, b_records);
    assert_eq!(a_report, b_report);
    let (c_records, _) = run(12, 12);
    assert_ne!(a_records, c_records);
}

#[test]
fn every_bot_completes_every_stage() {
    let (records, _) = run(3, 20);
    for r in &records {
        assert!(r.session.completed);
        assert_eq!(r.events.len(), 14 + 6);
        assert!(r.participant_turns("flo") >= 2 && r.participant_turns("gustavo") >= 4);
    }
}

#[test]
fn zero_bots_is_a_no_op() {
    let study = Arc::new(lausanne_fixture());
    let engine = simulation_engine(study.clone(), Arc::new(ResponseStore::in_memory()), 1);
    let summary = simulate(&engine, None, 0, &BotPolicy::calibrated(1)).unwrap();
    assert!(summary.completed.is_empty());
    let err = build_report(&study, &engine.store().responses().unwrap(), &[], &ReportOptions::default()).unwrap_err();
    assert!(matches!(err, ReportError::NoCompletedSessions));
}

#[test]
fn invalid_policy_rejected() {
    let mut p = BotPolicy::calibrated(1);
    p.chat_questions.insert("flo".into(), CountDistribution(vec![(1, 0.5), (2, 0.4)]));
    assert!(p.validate().is_err());
    let engine = simulation_engine(Arc::new(lausanne_fixture()), Arc::new(ResponseStore::in_memory()), 1);
    assert!(simulate(&engine, None, 3, &p).is_err());
    assert!(engine.snapshots().is_empty());
}

proptest! {
    #[test]
    fn normalized_weights_validate(raw in prop::collection::vec(0.01f64..10.0, 1..8)) {
        let total: f64 = raw.iter().sum();
        let mut p = BotPolicy::calibrated(0);
        p.chat_questions.insert("flo".into(), CountDistribution(raw.iter().enumerate().map(|(k, w)| (k, w / total)).collect()));
        prop_assert!(p.validate().is_ok());
        p.approval = [0.5, 0.5, 0.5];
        prop_assert!(p.validate().is_err());
    }
}
