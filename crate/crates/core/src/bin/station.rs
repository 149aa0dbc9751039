//! Base station: review queue, operator API, fine-tuning and parameter sync.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use scout_core::mission::{initial_head, run_mission, MissionConfig};
use scout_core::protocol::LinkSchedule;
use scout_core::station::{serve, OracleOperator, ServeOptions, Station, StationConfig, DEFAULT_ORACLE_BUDGET};
use scout_core::store::EventLog;

#[derive(Parser, Debug)]
#[command(name = "station", about = "Base station for operator review and few-shot training")]
#[command(group(clap::ArgGroup::new("link").required(true).args(["robot", "sim"])))]
struct Args {
    /// HTTP address of the operator API.
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// TCP address to accept the robot on.
    #[arg(long)]
    robot: Option<String>,
    /// Run the robot in-process over the simulated link; requires --oracle.
    #[arg(long)]
    sim: bool,
    /// Ground-truth annotations; answers the queue without a human.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_BUDGET)]
    oracle_budget: usize,
    /// Mission store (JSONL).
    #[arg(long)]
    store: Option<PathBuf>,
    /// Frame directory; defaults to the directory holding the annotations.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Base-class images; defaults to `<dataset>/base`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Sim mode: link schedule JSON applied in both directions.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 30_000)]
    sync_period_ms: u64,
    #[arg(long, default_value_t = 3)]
    novel_ratio: usize,
    #[arg(long, default_value_t = 0)]
    head_seed: u64,
    /// Stop after this long instead of waiting for Ctrl-C.
    #[arg(long)]
    run_for_ms: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("station: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> scout_core::Result<()> {
    let station_cfg = StationConfig {
        novel_ratio: args.novel_ratio,
        shots_per_class: args.oracle_budget,
        sync_period_ms: args.sync_period_ms,
        ..StationConfig::default()
    };
    let dataset = args
        .dataset
        .clone()
        .or_else(|| args.oracle.as_ref().and_then(|p| p.parent()).map(PathBuf::from));
    let base = args.base.clone().or_else(|| dataset.as_ref().map(|d| d.join("base")));

    if args.sim {
        let (Some(dataset), Some(_)) = (dataset, &args.oracle) else {
            return Err(scout_core::Error::InvalidInput("--sim needs --oracle".into()));
        };
        let mut cfg = MissionConfig::new(dataset);
        cfg.base = base;
        cfg.station = station_cfg;
        cfg.oracle_budget = args.oracle_budget;
        cfg.head_seed = args.head_seed;
        cfg.store = args.store.clone();
        if let Some(p) = &args.schedule {
            let link: LinkSchedule = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            cfg.uplink = link.clone();
            cfg.downlink = link;
        }
        let outcome = run_mission(&cfg)?;
        println!("{}", serde_json::to_string(&outcome.station_summary)?);
        return Ok(());
    }

    let base = base.ok_or_else(|| scout_core::Error::InvalidInput("live mode needs --base or --oracle".into()))?;
    let (head, pool) = initial_head(&base, &station_cfg.detector, args.head_seed, &station_cfg)?;
    let store = args.store.as_ref().map(EventLog::create).transpose()?;
    let station = Station::new(station_cfg, head, pool, store)?;
    let oracle = args
        .oracle
        .as_ref()
        .map(|p| OracleOperator::load(p, args.oracle_budget))
        .transpose()?;
    let opts = ServeOptions {
        http: Some(args.listen.clone()),
        robot: args.robot.clone(),
        oracle,
        ..ServeOptions::default()
    };
    let rt = tokio::runtime::Runtime::new()?;
    let run_for = args.run_for_ms;
    let (_, summary) = rt.block_on(serve(station, opts, async move {
        match run_for {
            Some(ms) => tokio::time::sleep(Duration::from_millis(ms)).await,
            None => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
