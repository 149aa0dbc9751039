//! Robot node: scores a frame directory and ships candidates to the station,
//! either over TCP or through the simulated link.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use scout_core::dataset::Dataset;
use scout_core::memory::VisualMemory;
use scout_core::mission::{initial_head, run_mission, MissionConfig};
use scout_core::protocol::LinkSchedule;
use scout_core::robot::{run_live, LiveOptions, RobotConfig, RobotNode, DEFAULT_TAU};
use scout_core::station::StationConfig;
use scout_core::store::EventLog;

#[derive(Parser, Debug)]
#[command(name = "robot", about = "Onboard interesting-scene detector")]
#[command(group(clap::ArgGroup::new("link").required(true).args(["endpoint", "sim"])))]
struct Args {
    /// Directory of frames in lexicographic order.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 30)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Station address for a live TCP link.
    #[arg(long)]
    endpoint: Option<String>,
    /// Link schedule JSON; runs the station and oracle in-process.
    #[arg(long)]
    sim: Option<PathBuf>,
    /// Memory loaded at start when present and saved at exit.
    #[arg(long)]
    memory_snapshot: Option<PathBuf>,
    /// Mission log (JSONL).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Base-class images for the initial head; defaults to `<dataset>/base`.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    buffer_capacity: usize,
    #[arg(long, default_value_t = 100)]
    frame_interval_ms: u64,
    /// Live mode: time to keep serving feedback after the last frame.
    #[arg(long, default_value_t = 5000)]
    linger_ms: u64,
    #[arg(long, default_value = "mission")]
    mission_id: String,
    #[arg(long, default_value_t = 0)]
    head_seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("robot: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> scout_core::Result<()> {
    let robot = RobotConfig {
        mission_id: args.mission_id.clone(),
        warmup: args.warmup,
        tau: args.tau,
        buffer_capacity: args.buffer_capacity,
        ..RobotConfig::default()
    };
    if let Some(schedule) = &args.sim {
        let link: LinkSchedule = serde_json::from_str(&std::fs::read_to_string(schedule)?)?;
        let mut cfg = MissionConfig::new(&args.dataset);
        cfg.base = args.base.clone();
        cfg.robot = robot;
        cfg.uplink = link.clone();
        cfg.downlink = link;
        cfg.frame_interval_ms = args.frame_interval_ms;
        cfg.head_seed = args.head_seed;
        cfg.robot_log = args.log.clone();
        cfg.memory_snapshot = args.memory_snapshot.clone();
        let outcome = run_mission(&cfg)?;
        println!("{}", outcome.report.to_json()?);
        return Ok(());
    }

    robot.validate()?;
    let ds = Dataset::open(&args.dataset)?;
    let base = args.base.clone().unwrap_or_else(|| args.dataset.join("base"));
    let (head, _) = initial_head(&base, &robot.detector, args.head_seed, &StationConfig::default())?;
    let memory = match args.memory_snapshot.as_ref().filter(|p| p.exists()) {
        Some(p) => VisualMemory::load(p)?,
        None => RobotNode::fresh_memory(&robot, ds.load_rgb(0)?.dimensions())?,
    };
    let log = args.log.as_ref().map(EventLog::create).transpose()?;
    let mut node = RobotNode::new(robot, memory, head, log)?;
    let opts = LiveOptions {
        endpoint: args.endpoint.clone().unwrap_or_default(),
        frame_interval_ms: args.frame_interval_ms,
        linger_ms: args.linger_ms,
        ..LiveOptions::default()
    };
    let stats = run_live(&mut node, &ds, &opts)?;
    if let Some(p) = &args.memory_snapshot {
        node.memory().save(p)?;
    }
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}
