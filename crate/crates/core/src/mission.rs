//! Headless mission: robot, station and oracle operator in one process,
//! connected by simulated links and driven by a simulated clock.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{BaseSet, Dataset};
use crate::error::{invalid, Result};
use crate::eval::{bandwidth_ratio, AucOpReport, InterestPoint, InterestSequence, MissionReport};
use crate::experiment::evaluate;
use crate::head::{DetectorConfig, HeadParams, SamplePool};
use crate::memory::VisualMemory;
use crate::protocol::{decode, encode, LinkSchedule, LinkSim, Message};
use crate::robot::{replay_robot_log, RobotConfig, RobotEvent, RobotNode, RobotStats};
use crate::station::{
    replay_store, OracleOperator, Station, StationConfig, StationEvent, StationSummary, DEFAULT_ORACLE_BUDGET,
};
use crate::store::{read_log, EventLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionConfig {
    pub dataset: PathBuf,
    /// Base-class images; defaults to `<dataset>/base`.
    pub base: Option<PathBuf>,
    /// Held-out detection set; defaults to `<dataset>/eval` when present.
    pub eval: Option<PathBuf>,
    pub robot: RobotConfig,
    pub station: StationConfig,
    pub uplink: LinkSchedule,
    pub downlink: LinkSchedule,
    pub frame_interval_ms: u64,
    pub oracle_budget: usize,
    pub head_seed: u64,
    pub robot_log: Option<PathBuf>,
    pub store: Option<PathBuf>,
    /// Memory loaded at start when the file exists and saved at the end.
    pub memory_snapshot: Option<PathBuf>,
    /// Simulated time allowed after the last frame to reach quiescence.
    pub max_drain_ms: u64,
}

impl MissionConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            base: None,
            eval: None,
            robot: RobotConfig::default(),
            station: StationConfig::default(),
            uplink: LinkSchedule::default(),
            downlink: LinkSchedule::default(),
            frame_interval_ms: 100,
            oracle_budget: DEFAULT_ORACLE_BUDGET,
            head_seed: 0,
            robot_log: None,
            store: None,
            memory_snapshot: None,
            max_drain_ms: 600_000,
        }
    }

    fn base_dir(&self) -> PathBuf {
        self.base.clone().unwrap_or_else(|| self.dataset.join("base"))
    }

    fn eval_dir(&self) -> Option<PathBuf> {
        match &self.eval {
            Some(p) => Some(p.clone()),
            None => Some(self.dataset.join("eval")).filter(|p| p.is_dir()),
        }
    }
}

/// A candidate as it reached the station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub frame_id: u64,
    pub score: f64,
    pub sent_ms: f64,
    pub arrive_ms: f64,
    /// Index of the robot drain that released the candidate.
    pub drain: usize,
}

#[derive(Debug, Clone)]
pub struct MissionOutcome {
    pub report: MissionReport,
    pub robot_head: HeadParams,
    pub station_head: HeadParams,
    pub robot_stats: RobotStats,
    pub station_summary: StationSummary,
    pub deliveries: Vec<Delivery>,
    /// Reached quiescence within the drain allowance.
    pub quiescent: bool,
}

/// Base head and training pool shared by robot and station.
pub fn initial_head(
    base_dir: &Path,
    detector: &DetectorConfig,
    seed: u64,
    station: &StationConfig,
) -> Result<(HeadParams, SamplePool)> {
    let base = BaseSet::load(base_dir, detector, &station.shot)?;
    let head = HeadParams::init(&base.class_features, detector.feature_dim(), detector.alpha, seed)?;
    let mut pool = SamplePool::new(station.novel_ratio, station.shots_per_class)?;
    pool.base_shots = base.shots;
    Ok((head, pool))
}

/// Mission metrics from the robot's scores and sends plus the final head.
/// Timings are left at zero.
pub fn build_report(
    mission_id: &str,
    ds: &Dataset,
    eval: Option<&Dataset>,
    detector: &DetectorConfig,
    scores: &[(u64, f64)],
    n_sent: u64,
    head: &HeadParams,
) -> Result<MissionReport> {
    let mut report = MissionReport::new(mission_id);
    report.n_frames = Some(scores.len() as u64);
    report.n_sent = Some(n_sent);
    if !scores.is_empty() {
        report.bandwidth_ratio = Some(bandwidth_ratio(n_sent as usize, scores.len())?);
    }
    if ds.has_annotations() && !scores.is_empty() {
        let points = scores
            .iter()
            .map(|&(frame_id, score)| InterestPoint {
                frame_id,
                score,
                interesting: ds.annotation_for(frame_id).is_some_and(|a| a.interesting),
            })
            .collect();
        report.auc_op = AucOpReport::from_sequence(&InterestSequence::new(points)?)?;
    }
    if let Some(eval) = eval {
        let classes: Vec<usize> = (0..head.n_classes()).collect();
        let res = evaluate(detector, head, eval, &classes)?;
        for (id, ap) in &res.per_class {
            report.per_class_ap.insert(head.class_names()[*id].clone(), *ap);
        }
        report.map = res.map;
        report.ap50 = res.ap50;
    }
    Ok(report)
}

/// Recomputes the report from a robot mission log and the datasets.
pub fn replay_report(cfg: &MissionConfig, robot_log: &Path) -> Result<MissionReport> {
    let records = read_log::<RobotEvent>(robot_log)?;
    let replay = replay_robot_log(&records)?;
    let head = replay
        .head
        .ok_or_else(|| invalid(format!("{} has no head snapshot", robot_log.display())))?;
    let ds = Dataset::open(&cfg.dataset)?;
    let eval = cfg.eval_dir().map(Dataset::open).transpose()?;
    build_report(
        &cfg.robot.mission_id,
        &ds,
        eval.as_ref(),
        &cfg.robot.detector,
        &replay.scores,
        replay.sent.len() as u64,
        &head,
    )
}

pub fn replay_station(store: &Path) -> Result<StationSummary> {
    Ok(replay_store(&read_log::<StationEvent>(store)?))
}

struct Sim {
    robot: RobotNode,
    station: Station,
    oracle: OracleOperator,
    uplink: LinkSim,
    downlink: LinkSim,
    deliveries: Vec<Delivery>,
    drains: usize,
    /// Send times of candidates in flight, keyed by frame id.
    pending: Vec<(u64, f64, usize)>,
}

impl Sim {
    /// One step over `[t, t + dt)`; `frame` is processed at `t`.
    fn step(&mut self, t: u64, dt: u64, frame: Option<(u64, Vec<u8>)>) -> Result<()> {
        let tf = t as f64;
        let end = t + dt;
        if t > 0 {
            for d in self.downlink.transfer(tf - dt as f64, tf)? {
                match decode(&d.bytes) {
                    Ok(msg) => {
                        for reply in self.robot.handle_message(t, msg)? {
                            self.uplink.send(encode(&reply)?, tf);
                        }
                    }
                    Err(e) => log::warn!("robot dropped a bad frame: {e}"),
                }
            }
        }
        if let Some((id, bytes)) = frame {
            self.robot.process(t, id, bytes)?;
        }
        if self.uplink.is_up(tf) && self.uplink.queued() == 0 && !self.robot.buffer().is_empty() {
            let drain = self.drains;
            self.drains += 1;
            for msg in self.robot.take_candidates(t, usize::MAX)? {
                if let Message::Candidate { frame_id, score, .. } = &msg {
                    self.pending.push((*frame_id, *score, drain));
                }
                self.uplink.send(encode(&msg)?, tf);
            }
        }
        for d in self.uplink.transfer(tf, end as f64)? {
            let at = d.arrive_ms.ceil() as u64;
            let msg = match decode(&d.bytes) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("station dropped a bad frame: {e}");
                    continue;
                }
            };
            if let Message::Candidate { frame_id, score, .. } = &msg {
                if let Some(i) = self.pending.iter().position(|p| p.0 == *frame_id) {
                    let (_, _, drain) = self.pending.remove(i);
                    self.deliveries.push(Delivery {
                        frame_id: *frame_id,
                        score: *score,
                        sent_ms: d.sent_ms,
                        arrive_ms: d.arrive_ms,
                        drain,
                    });
                }
            }
            self.station.handle_message(at, msg)?;
        }
        while let Some(id) = self.station.next_pending().map(|i| i.frame_id) {
            let answer = self.oracle.decide(id);
            self.station.operator_decision(end, id, answer.decision, answer.boxes)?;
        }
        self.station.run_cycle(end)?;
        self.station.poll_sync(end)?;
        for msg in self.station.take_outbox() {
            self.downlink.send(encode(&msg)?, end as f64);
        }
        Ok(())
    }

    fn links_idle(&self) -> bool {
        self.uplink.is_idle() && self.downlink.is_idle()
    }
}

/// Runs the whole mission and reports on it.
pub fn run_mission(cfg: &MissionConfig) -> Result<MissionOutcome> {
    let wall = Instant::now();
    cfg.robot.validate()?;
    if cfg.frame_interval_ms == 0 {
        return Err(invalid("frame interval must be positive"));
    }
    let ds = Dataset::open(&cfg.dataset)?;
    if ds.len() < cfg.robot.warmup {
        return Err(invalid(format!(
            "dataset has {} frames, fewer than the {} warmup frames",
            ds.len(),
            cfg.robot.warmup
        )));
    }
    let eval = cfg.eval_dir().map(Dataset::open).transpose()?;
    let detector = &cfg.robot.detector;
    let (head, pool) = initial_head(&cfg.base_dir(), detector, cfg.head_seed, &cfg.station)?;

    let robot_log = cfg.robot_log.as_ref().map(EventLog::create).transpose()?;
    let store = cfg.store.as_ref().map(EventLog::create).transpose()?;
    let memory = match cfg.memory_snapshot.as_ref().filter(|p| p.exists()) {
        Some(p) => VisualMemory::load(p)?,
        None => RobotNode::fresh_memory(&cfg.robot, ds.load_rgb(0)?.dimensions())?,
    };
    let robot = RobotNode::new(cfg.robot.clone(), memory, head.clone(), robot_log)?;
    let station = Station::new(cfg.station.clone(), head, pool, store)?;
    let mut sim = Sim {
        robot,
        station,
        oracle: OracleOperator::from_dataset(&ds, cfg.oracle_budget),
        uplink: LinkSim::new(cfg.uplink.clone())?,
        downlink: LinkSim::new(cfg.downlink.clone())?,
        deliveries: Vec::new(),
        drains: 0,
        pending: Vec::new(),
    };

    let warm = (0..cfg.robot.warmup as u64)
        .map(|id| sim.robot.features(&ds.read_bytes(id)?))
        .collect::<Result<Vec<_>>>()?;
    sim.robot.warmup(0, &warm)?;
    let hello = sim.robot.hello();
    sim.uplink.send(encode(&hello)?, 0.0);

    let dt = cfg.frame_interval_ms;
    let mut t = 0;
    for id in cfg.robot.warmup as u64..ds.len() as u64 {
        sim.step(t, dt, Some((id, ds.read_bytes(id)?)))?;
        t += dt;
    }

    let deadline = t + cfg.max_drain_ms;
    let mut quiescent = false;
    while t <= deadline {
        let settled = sim.station.queue().counts().pending == 0
            && !sim.station.training_wanted()
            && sim.robot.buffer().is_empty()
            && sim.links_idle();
        if settled {
            if sim.station.is_quiescent() {
                quiescent = true;
                break;
            }
            sim.station.final_sync(t)?;
        }
        sim.step(t, dt, None)?;
        t += dt;
    }
    // one more step so the robot consumes anything that just arrived
    sim.step(t, dt, None)?;
    sim.robot.finish(t)?;
    sim.station.record_status(t + dt)?;

    if let Some(p) = &cfg.memory_snapshot {
        sim.robot.memory().save(p)?;
    }
    let stats = sim.robot.stats();
    let mut report = build_report(
        &cfg.robot.mission_id,
        &ds,
        eval.as_ref(),
        detector,
        sim.robot.scores(),
        stats.sent,
        sim.robot.head(),
    )?;
    report.timings.mission_ms = Some(t);
    report.timings.wall_ms = wall.elapsed().as_millis() as u64;
    Ok(MissionOutcome {
        report,
        robot_head: sim.robot.head().clone(),
        station_head: sim.station.head().clone(),
        robot_stats: stats,
        station_summary: sim.station.summary(),
        deliveries: sim.deliveries,
        quiescent,
    })
}
