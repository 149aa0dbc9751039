#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use scout_core::synth::{generate, SynthConfig};

static GEN_LOCK: Mutex<()> = Mutex::new(());

/// Generates (once per target dir) and returns a synthetic mission directory.
pub fn synth_dataset(name: &str, cfg: &SynthConfig) -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("fixtures");
    let dir = root.join(name);
    let _guard = GEN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    if dir.join("done").exists() {
        return dir;
    }
    std::fs::create_dir_all(&root).unwrap();
    let staging = tempfile::tempdir_in(&root).unwrap();
    generate(staging.path(), cfg).unwrap();
    std::fs::write(staging.path().join("done"), b"").unwrap();
    let staged = staging.keep();
    if std::fs::rename(&staged, &dir).is_err() {
        // another test binary won the race
        let _ = std::fs::remove_dir_all(&staged);
    }
    dir
}

/// The default synthetic mission.
pub fn default_mission() -> PathBuf {
    synth_dataset("default_seed7", &SynthConfig::default())
}

/// A short mission for fast robot and station tests.
pub fn small_mission() -> PathBuf {
    synth_dataset(
        "small_seed3",
        &SynthConfig {
            seed: 3,
            n_frames: 90,
            warmup: 20,
            novel_fraction: 0.15,
            base_per_class: 4,
            n_eval: 10,
            ..SynthConfig::default()
        },
    )
}
