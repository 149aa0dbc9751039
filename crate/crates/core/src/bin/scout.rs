//! Offline tooling: synthetic missions, headless runs, replays and sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scout_core::eval::MissionReport;
use scout_core::experiment::ratio_sweep;
use scout_core::mission::{replay_report, replay_station, run_mission, MissionConfig};
use scout_core::protocol::LinkSchedule;
use scout_core::synth::{generate, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "scout", about = "Synthetic missions, headless runs and replays")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic mission: frames, annotations, base and eval sets.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 0.1)]
        novel_fraction: f64,
        /// Frames between one-cell pan steps; 0 keeps the view fixed.
        #[arg(long, default_value_t = 0)]
        pan_every: usize,
    },
    /// Robot, station and oracle operator over the simulated link.
    Mission {
        #[arg(long)]
        dataset: PathBuf,
        /// Full mission configuration as JSON; other flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Link schedule JSON for the robot-to-station direction.
        #[arg(long)]
        uplink: Option<PathBuf>,
        #[arg(long)]
        downlink: Option<PathBuf>,
        #[arg(long)]
        robot_log: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Recompute the mission report from a robot mission log.
    Replay {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "mission")]
        mission_id: String,
        /// Report to compare against, ignoring timings.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Summarise a station store.
    ReplayStore {
        #[arg(long)]
        store: PathBuf,
    },
    /// Novel mAP against the novel-shot repetition ratio.
    RatioSweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 500)]
        steps: u64,
        #[arg(long, default_value_t = 3)]
        shots: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        ratios: Vec<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scout: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read_schedule(p: &PathBuf) -> scout_core::Result<LinkSchedule> {
    Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
}

fn run(cmd: Cmd) -> scout_core::Result<()> {
    match cmd {
        Cmd::GenSynthetic {
            out,
            seed,
            frames,
            novel_fraction,
            pan_every,
        } => {
            let cfg = SynthConfig {
                seed,
                n_frames: frames,
                novel_fraction,
                pan_every,
                ..SynthConfig::default()
            };
            let summary = generate(&out, &cfg)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Mission {
            dataset,
            config,
            tau,
            warmup,
            uplink,
            downlink,
            robot_log,
            store,
            report,
        } => {
            let mut cfg = match &config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => MissionConfig::new(&dataset),
            };
            cfg.dataset = dataset;
            if let Some(tau) = tau {
                cfg.robot.tau = tau;
            }
            if let Some(w) = warmup {
                cfg.robot.warmup = w;
            }
            if let Some(p) = &uplink {
                cfg.uplink = read_schedule(p)?;
            }
            if let Some(p) = &downlink {
                cfg.downlink = read_schedule(p)?;
            }
            cfg.robot_log = robot_log.or(cfg.robot_log);
            cfg.store = store.or(cfg.store);
            let outcome = run_mission(&cfg)?;
            if let Some(p) = &report {
                outcome.report.emit(p)?;
            }
            println!("{}", outcome.report.to_json()?);
            if !outcome.quiescent {
                log::warn!("mission did not reach quiescence");
            }
        }
        Cmd::Replay {
            dataset,
            log,
            mission_id,
            check,
        } => {
            let mut cfg = MissionConfig::new(dataset);
            cfg.robot.mission_id = mission_id;
            let report = replay_report(&cfg, &log)?;
            println!("{}", report.to_json()?);
            if let Some(p) = &check {
                let mut want = MissionReport::load(p)?;
                want.timings = report.timings.clone();
                if want != report {
                    return Err(scout_core::Error::Validation(format!(
                        "replay differs from {}",
                        p.display()
                    )));
                }
                eprintln!("replay matches {}", p.display());
            }
        }
        Cmd::ReplayStore { store } => {
            println!("{}", serde_json::to_string(&replay_station(&store)?)?);
        }
        Cmd::RatioSweep {
            out,
            seeds,
            steps,
            shots,
            ratios,
        } => {
            for seed in 0..seeds {
                for r in ratio_sweep(&out, seed, &ratios, steps, shots)? {
                    println!("{}", serde_json::to_string(&r)?);
                }
            }
        }
    }
    Ok(())
}
