use std::path::Path;
use std::process::{Command, Output};

fn run(bin: &str, args: &[&str]) -> Output {
    let out = Command::new(bin).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{bin} {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn generate(dir: &Path) -> String {
    let ds = dir.join("ds");
    let ds_s = ds.to_str().unwrap().to_string();
    let out = run(
        env!("CARGO_BIN_EXE_scout"),
        &["gen-synthetic", "--out", &ds_s, "--frames", "80", "--seed", "11"],
    );
    assert_eq!(json(&out)["n_frames"], 80);
    assert!(ds.join("annotations.jsonl").exists());
    ds_s
}

#[test]
fn scout_mission_then_replay_check() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(dir.path());
    let log = dir.path().join("robot.jsonl");
    let store = dir.path().join("store.jsonl");
    let report = dir.path().join("report.json");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let out = run(
        env!("CARGO_BIN_EXE_scout"),
        &[
            "mission",
            "--dataset",
            &ds,
            "--robot-log",
            &p(&log),
            "--store",
            &p(&store),
            "--report",
            &p(&report),
        ],
    );
    let rep = json(&out);
    assert_eq!(rep["n_frames"], 50);
    assert!(rep["bandwidth_ratio"].as_f64().unwrap() <= 1.0);

    let out = run(
        env!("CARGO_BIN_EXE_scout"),
        &["replay", "--dataset", &ds, "--log", &p(&log), "--check", &p(&report)],
    );
    assert_eq!(json(&out)["bandwidth_ratio"], rep["bandwidth_ratio"]);

    let out = run(env!("CARGO_BIN_EXE_scout"), &["replay-store", "--store", &p(&store)]);
    assert!(json(&out)["head_version"].as_u64().unwrap() >= 1);
}

#[test]
fn robot_and_station_sim_modes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(dir.path());
    let schedule = dir.path().join("schedule.json");
    std::fs::write(&schedule, r#"{"outages": [[500, 1500]], "latency_ms": 20}"#).unwrap();
    let log = dir.path().join("robot.jsonl");
    let snap = dir.path().join("memory.bin");
    let out = run(
        env!("CARGO_BIN_EXE_robot"),
        &[
            "--dataset",
            &ds,
            "--warmup",
            "30",
            "--tau",
            "0.75",
            "--sim",
            schedule.to_str().unwrap(),
            "--memory-snapshot",
            snap.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ],
    );
    assert_eq!(json(&out)["n_frames"], 50);
    assert!(log.exists() && snap.exists());

    let annotations = Path::new(&ds).join("annotations.jsonl");
    let store = dir.path().join("store.jsonl");
    let out = run(
        env!("CARGO_BIN_EXE_station"),
        &[
            "--sim",
            "--oracle",
            annotations.to_str().unwrap(),
            "--store",
            store.to_str().unwrap(),
        ],
    );
    let summary = json(&out);
    assert_eq!(summary["uninteresting"], summary["feedback_sent"]);
    assert!(store.exists());
}

#[test]
fn robot_requires_a_link() {
    let out = Command::new(env!("CARGO_BIN_EXE_robot"))
        .args(["--dataset", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_robot"))
        .args(["--dataset", "/nonexistent", "--sim", "/nonexistent.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
