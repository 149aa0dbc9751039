mod common;

use std::collections::BTreeMap;

use scout_core::memory::VisualMemory;
use scout_core::mission::{replay_report, replay_station, run_mission, MissionConfig};
use scout_core::protocol::LinkSchedule;
use scout_core::robot::{replay_robot_log, RobotEvent};
use scout_core::store::read_log;

fn outage_config(start: u64, end: u64) -> MissionConfig {
    let mut cfg = MissionConfig::new(common::default_mission());
    cfg.uplink = LinkSchedule {
        outages: vec![(start, end)],
        latency_ms: 40,
        ..LinkSchedule::default()
    };
    cfg
}

#[test]
fn buffered_candidates_arrive_highest_score_first_after_an_outage() {
    let cfg = outage_config(3000, 12000);
    let out = run_mission(&cfg).unwrap();
    assert!(out.quiescent);
    let mut drains: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for d in &out.deliveries {
        drains.entry(d.drain).or_default().push(d.score);
    }
    for (drain, scores) in &drains {
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "drain {drain}: {scores:?}");
    }
    let reconnect = out
        .deliveries
        .iter()
        .find(|d| d.sent_ms >= 12000.0)
        .map(|d| d.drain)
        .unwrap();
    assert!(
        drains[&reconnect].len() > 1,
        "outage buffered nothing: {:?}",
        out.deliveries
    );
    assert!(out.deliveries.iter().all(|d| !(3000.0..12000.0).contains(&d.sent_ms)));
    assert_eq!(out.deliveries.len() as u64, out.robot_stats.sent);
    assert_eq!(
        out.robot_stats.sent,
        out.robot_stats.candidates - out.robot_stats.evicted
    );
}

#[test]
fn small_buffer_evicts_during_a_long_outage() {
    let mut cfg = outage_config(0, 20000);
    cfg.robot.buffer_capacity = 2;
    let out = run_mission(&cfg).unwrap();
    assert!(out.robot_stats.evicted > 0);
    assert_eq!(out.deliveries.len() as u64, out.robot_stats.sent);
    assert!(out.quiescent);
}

#[test]
fn logs_replay_to_the_reported_figures() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = outage_config(1000, 2000);
    cfg.robot_log = Some(dir.path().join("robot.jsonl"));
    cfg.store = Some(dir.path().join("store.jsonl"));
    let out = run_mission(&cfg).unwrap();
    assert_eq!(out.robot_head, out.station_head);

    let mut replayed = replay_report(&cfg, cfg.robot_log.as_ref().unwrap()).unwrap();
    assert_eq!(replayed.timings.wall_ms, 0);
    replayed.timings = out.report.timings.clone();
    assert_eq!(replayed, out.report);
    assert_eq!(
        replay_station(cfg.store.as_ref().unwrap()).unwrap(),
        out.station_summary
    );
}

#[test]
fn memory_snapshot_is_saved_and_resumed() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("memory.bin");
    let mut cfg = MissionConfig::new(common::small_mission());
    cfg.robot.warmup = 20;
    cfg.memory_snapshot = Some(snap.clone());
    cfg.robot_log = Some(dir.path().join("first.jsonl"));
    run_mission(&cfg).unwrap();
    let saved = VisualMemory::load(&snap).unwrap();
    assert_eq!(saved.shape(), first_shape(&cfg));
    cfg.robot_log = Some(dir.path().join("second.jsonl"));
    run_mission(&cfg).unwrap();
    let scores = |name: &str| {
        let records = read_log::<RobotEvent>(&dir.path().join(name)).unwrap();
        replay_robot_log(&records).unwrap().scores
    };
    let (first, second) = (scores("first.jsonl"), scores("second.jsonl"));
    assert_eq!(first.len(), second.len());
    // a resumed memory has already seen the mission
    assert_ne!(first, second);
}

fn first_shape(cfg: &MissionConfig) -> (usize, usize, usize) {
    let ds = scout_core::dataset::Dataset::open(&cfg.dataset).unwrap();
    let memory = scout_core::robot::RobotNode::fresh_memory(&cfg.robot, ds.load_rgb(0).unwrap().dimensions()).unwrap();
    memory.shape()
}

#[test]
fn too_short_dataset_is_rejected() {
    let mut cfg = MissionConfig::new(common::small_mission());
    cfg.robot.warmup = 10_000;
    assert!(run_mission(&cfg).is_err());
    let cfg = MissionConfig::new(std::path::Path::new("/nonexistent/mission"));
    assert!(run_mission(&cfg).is_err());
}
