//! Base-station service: review queue, operator decisions, shot pool,
//! fine-tuning cycles and parameter sync.

pub mod api;
mod live;
mod oracle;
mod queue;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub use live::{serve, ReadyHook, ServeOptions};
pub use oracle::{OracleAnswer, OracleOperator, DEFAULT_ORACLE_BUDGET};
pub use queue::{Decision, ItemStatus, QueueCounts, ReviewItem, ReviewQueue};

use crate::dataset::AnnotatedBox;
use crate::error::{Error, Result};
use crate::features::{decode_image, extract_features, BBox};
use crate::head::{
    fine_tune, Budget, DetectorConfig, FineTuneConfig, FineTuneOutcome, HeadParams, NovelShot, SamplePool, ShotConfig,
    NOVEL_CAPACITY,
};
use crate::protocol::{Message, MessageKind, SyncScheduler, DEFAULT_SYNC_PERIOD_MS};
use crate::store::{EventLog, Record};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub detector: DetectorConfig,
    pub shot: ShotConfig,
    /// Times each novel shot is repeated in the virtual training pool.
    pub novel_ratio: usize,
    pub shots_per_class: usize,
    pub fine_tune: FineTuneConfig,
    /// Training cycles run after the most recent shot arrived.
    pub cycles_per_shot: u32,
    pub sync_period_ms: u64,
    pub seed: u64,
}

impl Default for StationConfig {
    fn default() -> Self {
        let detector = DetectorConfig::default();
        Self {
            shot: detector.shot_config(),
            detector,
            novel_ratio: 3,
            shots_per_class: DEFAULT_ORACLE_BUDGET,
            fine_tune: FineTuneConfig {
                budget: Budget::Steps(200),
                ..FineTuneConfig::default()
            },
            cycles_per_shot: 3,
            sync_period_ms: DEFAULT_SYNC_PERIOD_MS,
            seed: 0,
        }
    }
}

/// Station store events, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StationEvent {
    Start {
        head_version: u64,
        classes: Vec<String>,
        base_shots: usize,
    },
    Hello {
        node: String,
        mission_id: String,
        head_version: u64,
    },
    Candidate {
        frame_id: u64,
        score: f64,
        duplicate: bool,
    },
    Decision {
        frame_id: u64,
        decision: Decision,
        boxes: Vec<AnnotatedBox>,
    },
    FeedbackSent {
        frame_id: u64,
    },
    ClassRegistered {
        class: String,
        class_id: usize,
        version: u64,
    },
    Shot {
        class: String,
        class_id: usize,
        frame_id: u64,
        bbox: AnnotatedBox,
    },
    Cycle {
        cycle: u64,
        steps: u64,
        loss: Option<f64>,
        version: u64,
    },
    CycleDiscarded {
        cycle: u64,
    },
    TrainingFailed {
        cycle: u64,
        error: String,
    },
    Delta {
        version: u64,
    },
    Ack {
        version: u64,
    },
    Ignored {
        message: MessageKind,
    },
    Status {
        status: MissionStatus,
    },
}

/// Pushed to `/events` subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UiEvent {
    Queued {
        frame_id: u64,
        score: f64,
        pending: usize,
    },
    Decided {
        frame_id: u64,
        decision: Decision,
        pending: usize,
    },
    ClassRegistered {
        class: String,
        class_id: usize,
    },
    Training {
        cycle: u64,
        state: TrainingState,
        version: u64,
        loss: Option<f64>,
    },
    Delta {
        version: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingState {
    Started,
    Completed,
    Failed,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub base: usize,
    pub novel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionStatus {
    pub counts: QueueCounts,
    pub head_version: u64,
    pub acked_version: u64,
    pub classes: Vec<String>,
    pub pool: PoolCounts,
    pub cycles_completed: u64,
    pub training: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub class: String,
    pub class_id: usize,
    pub frame_id: u64,
    pub bbox: AnnotatedBox,
}

/// State that the store replay must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSummary {
    pub head_version: u64,
    pub classes: Vec<String>,
    pub shots: Vec<ShotRecord>,
    pub candidates: usize,
    pub interesting: usize,
    pub uninteresting: usize,
    pub feedback_sent: usize,
    pub deltas: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecisionOutcome {
    Applied,
    /// The same decision was already recorded for this frame.
    Duplicate,
}

/// One fine-tuning cycle over a snapshot of the head and the pool.
#[derive(Debug, Clone)]
pub struct CycleJob {
    pub cycle: u64,
    params: HeadParams,
    pool: SamplePool,
    cfg: FineTuneConfig,
    seed: u64,
}

impl CycleJob {
    pub fn run(&self) -> Result<FineTuneOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let out = fine_tune(&self.params, &self.pool, &self.cfg, &mut rng)?;
        if !out.params.is_finite() {
            return Err(Error::Training("parameters became non-finite".into()));
        }
        Ok(out)
    }

    pub fn input_version(&self) -> u64 {
        self.params.version()
    }

    pub fn pool_len(&self) -> usize {
        self.pool.virtual_len()
    }
}

pub struct Station {
    cfg: StationConfig,
    head: HeadParams,
    pool: SamplePool,
    queue: ReviewQueue,
    store: Option<EventLog<StationEvent>>,
    sync: SyncScheduler,
    outbox: Vec<Message>,
    events: broadcast::Sender<UiEvent>,
    cycles_left: u32,
    next_cycle: u64,
    running: Option<u64>,
    cycles_completed: u64,
    feedback_sent: usize,
    shots: Vec<ShotRecord>,
    deltas: Vec<u64>,
}

impl Station {
    /// `pool` carries the base shots; `head` must already know the base classes.
    pub fn new(
        cfg: StationConfig,
        head: HeadParams,
        pool: SamplePool,
        store: Option<EventLog<StationEvent>>,
    ) -> Result<Self> {
        if !pool.novel_shots.is_empty() {
            return Err(Error::Validation("the initial pool must hold base shots only".into()));
        }
        let (events, _) = broadcast::channel(1024);
        let sync = SyncScheduler::new(cfg.sync_period_ms, 0, head.version());
        let mut s = Self {
            cfg,
            head,
            pool,
            queue: ReviewQueue::new(),
            store,
            sync,
            outbox: Vec::new(),
            events,
            cycles_left: 0,
            next_cycle: 0,
            running: None,
            cycles_completed: 0,
            feedback_sent: 0,
            shots: Vec::new(),
            deltas: Vec::new(),
        };
        let start = StationEvent::Start {
            head_version: s.head.version(),
            classes: s.head.class_names().to_vec(),
            base_shots: s.pool.base_shots.len(),
        };
        s.persist(0, start)?;
        Ok(s)
    }

    pub fn config(&self) -> &StationConfig {
        &self.cfg
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn pool(&self) -> &SamplePool {
        &self.pool
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    pub fn subscribe(&self) -> broadcast::Receiver<UiEvent> {
        self.events.subscribe()
    }

    fn persist(&mut self, t: u64, event: StationEvent) -> Result<()> {
        if let Some(store) = &mut self.store {
            store.append(t, event)?;
        }
        Ok(())
    }

    fn notify(&self, event: UiEvent) {
        // nobody listening is fine
        let _ = self.events.send(event);
    }

    pub fn take_outbox(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.outbox)
    }

    pub fn outbox_len(&self) -> usize {
        self.outbox.len()
    }

    pub fn handle_message(&mut self, t: u64, msg: Message) -> Result<()> {
        if let Err(e) = msg.validate() {
            log::warn!("dropping invalid {}: {e}", msg.kind().as_str());
            return self.persist(t, StationEvent::Ignored { message: msg.kind() });
        }
        match msg {
            Message::Candidate {
                frame_id, score, image, ..
            } => {
                let fresh = self.queue.enqueue(frame_id, image, score, t);
                self.persist(
                    t,
                    StationEvent::Candidate {
                        frame_id,
                        score,
                        duplicate: !fresh,
                    },
                )?;
                self.notify(UiEvent::Queued {
                    frame_id,
                    score,
                    pending: self.queue.counts().pending,
                });
            }
            Message::Hello {
                node,
                mission_id,
                head_version,
            } => {
                log::info!("robot {node} joined mission {mission_id} at head v{head_version}");
                self.persist(
                    t,
                    StationEvent::Hello {
                        node,
                        mission_id,
                        head_version,
                    },
                )?;
            }
            Message::Ack {
                acked: MessageKind::ParamUpdate,
                version: Some(v),
                ..
            } => {
                self.sync.ack(v);
                self.persist(t, StationEvent::Ack { version: v })?;
            }
            other => {
                log::warn!("station ignores {} from robot", other.kind().as_str());
                self.persist(t, StationEvent::Ignored { message: other.kind() })?;
            }
        }
        Ok(())
    }

    pub fn next_pending(&self) -> Option<&ReviewItem> {
        self.queue.next_pending()
    }

    pub fn operator_decision(
        &mut self,
        t: u64,
        frame_id: u64,
        decision: Decision,
        boxes: Vec<AnnotatedBox>,
    ) -> Result<DecisionOutcome> {
        let item = self
            .queue
            .get(frame_id)
            .ok_or_else(|| Error::NotFound(format!("frame {frame_id} is not in the review queue")))?;
        if item.status != ItemStatus::Pending {
            if item.status == decision.into() {
                return Ok(DecisionOutcome::Duplicate);
            }
            return Err(Error::Validation(format!("frame {frame_id} was already reviewed")));
        }
        match decision {
            Decision::Uninteresting => {
                self.queue.resolve(frame_id, decision)?;
                self.outbox.push(Message::FeedbackUninteresting { frame_id });
                self.feedback_sent += 1;
                self.persist(
                    t,
                    StationEvent::Decision {
                        frame_id,
                        decision,
                        boxes: Vec::new(),
                    },
                )?;
                self.persist(t, StationEvent::FeedbackSent { frame_id })?;
            }
            Decision::Interesting => {
                let image = item.image.clone();
                self.annotate(t, frame_id, &image, &boxes)?;
            }
        }
        self.notify(UiEvent::Decided {
            frame_id,
            decision,
            pending: self.queue.counts().pending,
        });
        Ok(DecisionOutcome::Applied)
    }

    fn annotate(&mut self, t: u64, frame_id: u64, image: &[u8], boxes: &[AnnotatedBox]) -> Result<()> {
        if boxes.is_empty() {
            return Err(Error::Validation(
                "an interesting decision needs at least one box".into(),
            ));
        }
        let mut bboxes = Vec::with_capacity(boxes.len());
        for b in boxes {
            if b.class.trim().is_empty() {
                return Err(Error::Validation("every box needs a class name".into()));
            }
            bboxes.push(b.bbox().map_err(|e| Error::Validation(e.to_string()))?);
        }
        let new_classes: BTreeSet<&str> = boxes
            .iter()
            .map(|b| b.class.as_str())
            .filter(|c| self.head.class_id(c).is_none())
            .collect();
        if self.head.n_novel() + new_classes.len() > NOVEL_CAPACITY {
            return Err(Error::Capacity(format!(
                "registering {} new classes would exceed the novel capacity of {NOVEL_CAPACITY}",
                new_classes.len()
            )));
        }
        let rgb = decode_image(image)?;
        let dims = rgb.dimensions();
        let tensor = extract_features(&rgb, &self.cfg.detector.backbone)?;
        let clipped: Vec<BBox> = bboxes
            .iter()
            .map(|b| {
                b.clip(dims.0 as f64, dims.1 as f64)
                    .ok_or_else(|| Error::Validation(format!("box {b:?} lies outside the {}x{} image", dims.0, dims.1)))
            })
            .collect::<Result<_>>()?;

        self.queue.resolve(frame_id, Decision::Interesting)?;
        self.persist(
            t,
            StationEvent::Decision {
                frame_id,
                decision: Decision::Interesting,
                boxes: boxes.to_vec(),
            },
        )?;
        for (b, bbox) in boxes.iter().zip(&clipped) {
            let pooled = crate::features::roi_pool(&tensor, bbox, dims, self.cfg.detector.pool_grid)?;
            let (class_id, created) = self.head.register_novel_class(&b.class, &pooled.vector)?;
            if created {
                self.persist(
                    t,
                    StationEvent::ClassRegistered {
                        class: b.class.clone(),
                        class_id,
                        version: self.head.version(),
                    },
                )?;
                self.notify(UiEvent::ClassRegistered {
                    class: b.class.clone(),
                    class_id,
                });
            }
            let (pooled, samples) =
                self.cfg
                    .detector
                    .shot_samples(&tensor, dims, bbox, &clipped, class_id, &self.cfg.shot)?;
            self.pool.novel_shots.push(NovelShot {
                class_id,
                class_name: b.class.clone(),
                image_ref: format!("frame:{frame_id}"),
                bbox: *bbox,
                pooled,
                source_frame_id: frame_id,
                samples,
            });
            let rec = ShotRecord {
                class: b.class.clone(),
                class_id,
                frame_id,
                bbox: AnnotatedBox::from_bbox(&b.class, bbox),
            };
            self.shots.push(rec.clone());
            self.persist(
                t,
                StationEvent::Shot {
                    class: rec.class,
                    class_id,
                    frame_id,
                    bbox: rec.bbox,
                },
            )?;
        }
        let mut classes: Vec<&str> = Vec::new();
        for b in boxes {
            if !classes.contains(&b.class.as_str()) {
                classes.push(&b.class);
            }
        }
        for class in classes {
            let class_boxes: Vec<BBox> = boxes
                .iter()
                .zip(&clipped)
                .filter(|(b, _)| b.class == class)
                .map(|(_, c)| *c)
                .collect();
            self.outbox.push(Message::FeedbackAnnotation {
                frame_id,
                class_name: class.to_string(),
                boxes: class_boxes,
            });
        }
        self.cycles_left = self.cfg.cycles_per_shot;
        Ok(())
    }

    pub fn training_wanted(&self) -> bool {
        self.cycles_left > 0 && !self.pool.novel_shots.is_empty()
    }

    pub fn is_training(&self) -> bool {
        self.running.is_some()
    }

    /// Snapshots the head and pool for the next cycle, if one is due.
    pub fn start_cycle(&mut self, _t: u64) -> Option<CycleJob> {
        if self.running.is_some() || !self.training_wanted() {
            return None;
        }
        self.cycles_left -= 1;
        let cycle = self.next_cycle;
        self.next_cycle += 1;
        self.running = Some(cycle);
        self.notify(UiEvent::Training {
            cycle,
            state: TrainingState::Started,
            version: self.head.version(),
            loss: None,
        });
        Some(CycleJob {
            cycle,
            params: self.head.clone(),
            pool: self.pool.clone(),
            cfg: self.cfg.fine_tune.clone(),
            seed: self.cfg.seed.wrapping_add(cycle),
        })
    }

    /// Adopts a finished cycle. Failures and cycles overtaken by a class
    /// registration leave the head at its previous version.
    pub fn finish_cycle(&mut self, t: u64, job: &CycleJob, result: Result<FineTuneOutcome>) -> Result<()> {
        if self.running != Some(job.cycle) {
            return Err(Error::Validation(format!("cycle {} is not running", job.cycle)));
        }
        self.running = None;
        match result {
            Err(e) => {
                log::error!(
                    "training cycle {} failed, keeping v{}: {e}",
                    job.cycle,
                    self.head.version()
                );
                self.persist(
                    t,
                    StationEvent::TrainingFailed {
                        cycle: job.cycle,
                        error: e.to_string(),
                    },
                )?;
                self.notify(UiEvent::Training {
                    cycle: job.cycle,
                    state: TrainingState::Failed,
                    version: self.head.version(),
                    loss: None,
                });
            }
            Ok(_) if job.input_version() != self.head.version() => {
                log::info!("cycle {} started from a superseded head; discarding", job.cycle);
                self.cycles_left = self.cycles_left.max(1);
                self.persist(t, StationEvent::CycleDiscarded { cycle: job.cycle })?;
                self.notify(UiEvent::Training {
                    cycle: job.cycle,
                    state: TrainingState::Discarded,
                    version: self.head.version(),
                    loss: None,
                });
            }
            Ok(out) => {
                self.head = out.params;
                self.cycles_completed += 1;
                self.persist(
                    t,
                    StationEvent::Cycle {
                        cycle: job.cycle,
                        steps: out.steps,
                        loss: out.last_loss,
                        version: self.head.version(),
                    },
                )?;
                self.notify(UiEvent::Training {
                    cycle: job.cycle,
                    state: TrainingState::Completed,
                    version: self.head.version(),
                    loss: out.last_loss,
                });
                self.poll_sync(t)?;
            }
        }
        Ok(())
    }

    /// Runs one cycle to completion on the calling thread.
    pub fn run_cycle(&mut self, t: u64) -> Result<bool> {
        let Some(job) = self.start_cycle(t) else {
            return Ok(false);
        };
        let result = job.run();
        self.finish_cycle(t, &job, result)?;
        Ok(true)
    }

    /// Queues a parameter update when the sync period has elapsed and a newer
    /// version exists. Reads only happen between cycles.
    pub fn poll_sync(&mut self, t: u64) -> Result<bool> {
        if self.running.is_some() || !self.sync.sync_due(t, self.head.version()) {
            return Ok(false);
        }
        self.push_update(t)?;
        Ok(true)
    }

    /// Pushes the current head regardless of the period, if it is newer than
    /// the robot's acknowledged version.
    pub fn final_sync(&mut self, t: u64) -> Result<bool> {
        if self.running.is_some() || self.head.version() <= self.sync.acked_version() {
            return Ok(false);
        }
        self.push_update(t)?;
        Ok(true)
    }

    fn push_update(&mut self, t: u64) -> Result<()> {
        let version = self.head.version();
        self.outbox.push(Message::ParamUpdate(self.head.snapshot_delta()));
        self.sync.record_sync(t);
        self.deltas.push(version);
        self.persist(t, StationEvent::Delta { version })?;
        self.notify(UiEvent::Delta { version });
        Ok(())
    }

    pub fn acked_version(&self) -> u64 {
        self.sync.acked_version()
    }

    /// No pending reviews, no training left and the robot holds the latest head.
    pub fn is_quiescent(&self) -> bool {
        self.queue.counts().pending == 0
            && self.running.is_none()
            && !self.training_wanted()
            && self.outbox.is_empty()
            && self.sync.acked_version() >= self.head.version()
    }

    pub fn status(&self) -> MissionStatus {
        MissionStatus {
            counts: self.queue.counts(),
            head_version: self.head.version(),
            acked_version: self.sync.acked_version(),
            classes: self.head.class_names().to_vec(),
            pool: PoolCounts {
                base: self.pool.base_shots.len(),
                novel: self.pool.novel_shots.len(),
            },
            cycles_completed: self.cycles_completed,
            training: self.running.is_some(),
        }
    }

    pub fn record_status(&mut self, t: u64) -> Result<()> {
        let status = self.status();
        self.persist(t, StationEvent::Status { status })
    }

    pub fn summary(&self) -> StationSummary {
        let c = self.queue.counts();
        StationSummary {
            head_version: self.head.version(),
            classes: self.head.class_names().to_vec(),
            shots: self.shots.clone(),
            candidates: c.received,
            interesting: c.interesting,
            uninteresting: c.uninteresting,
            feedback_sent: self.feedback_sent,
            deltas: self.deltas.clone(),
        }
    }
}

/// Rebuilds the station summary from its store.
pub fn replay_store(records: &[Record<StationEvent>]) -> StationSummary {
    let mut s = StationSummary {
        head_version: 0,
        classes: Vec::new(),
        shots: Vec::new(),
        candidates: 0,
        interesting: 0,
        uninteresting: 0,
        feedback_sent: 0,
        deltas: Vec::new(),
    };
    for r in records {
        match &r.event {
            StationEvent::Start {
                head_version, classes, ..
            } => {
                s.head_version = *head_version;
                s.classes = classes.clone();
            }
            StationEvent::Candidate { duplicate: false, .. } => s.candidates += 1,
            StationEvent::Decision { decision, .. } => match decision {
                Decision::Interesting => s.interesting += 1,
                Decision::Uninteresting => s.uninteresting += 1,
            },
            StationEvent::FeedbackSent { .. } => s.feedback_sent += 1,
            StationEvent::ClassRegistered { class, version, .. } => {
                s.classes.push(class.clone());
                s.head_version = *version;
            }
            StationEvent::Shot {
                class,
                class_id,
                frame_id,
                bbox,
            } => s.shots.push(ShotRecord {
                class: class.clone(),
                class_id: *class_id,
                frame_id: *frame_id,
                bbox: bbox.clone(),
            }),
            StationEvent::Cycle { version, .. } => s.head_version = *version,
            StationEvent::Delta { version } => s.deltas.push(*version),
            _ => {}
        }
    }
    s
}
