//! Robot-side pipeline: warmup, online interestingness, candidate buffering,
//! operator write-backs, parameter updates and onboard detection.

mod live;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use live::{run_live, LiveOptions};

use crate::error::{invalid, Result};
use crate::features::{decode_image, extract_features, FeatureTensor};
use crate::head::{DetectorConfig, HeadParams};
use crate::memory::{MemoryConfig, VisualMemory, WarmupStatus};
use crate::protocol::{BufferedCandidate, CandidateBuffer, Message, MessageKind, DEFAULT_BUFFER_CAPACITY};
use crate::store::{EventLog, StoredDelta};

pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_FRAME_CACHE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub node: String,
    pub mission_id: String,
    pub warmup: usize,
    /// Frames scoring at or above this become candidates.
    pub tau: f64,
    pub memory: MemoryConfig,
    pub buffer_capacity: usize,
    pub frame_cache: usize,
    pub detector: DetectorConfig,
    /// Run the onboard detector on every post-warmup frame.
    pub detect: bool,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            node: "robot".into(),
            mission_id: "mission".into(),
            warmup: 30,
            tau: DEFAULT_TAU,
            memory: MemoryConfig::default(),
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            frame_cache: DEFAULT_FRAME_CACHE,
            detector: DetectorConfig::default(),
            detect: true,
        }
    }
}

impl RobotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid(format!("tau {} must lie in [0, 1]", self.tau)));
        }
        if self.buffer_capacity == 0 || self.frame_cache == 0 {
            return Err(invalid("buffer capacity and frame cache must be positive"));
        }
        Ok(())
    }
}

/// Mission log events, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobotEvent {
    Start {
        node: String,
        mission_id: String,
        tau: f64,
        warmup: usize,
        head: StoredDelta,
    },
    Warmup {
        frames: usize,
    },
    Frame {
        frame_id: u64,
        score: f64,
        candidate: bool,
        detections: usize,
    },
    Evicted {
        frame_id: u64,
        score: f64,
    },
    Sent {
        frame_id: u64,
        score: f64,
    },
    CacheEvicted {
        frame_id: u64,
    },
    WriteBack {
        frame_id: u64,
    },
    WriteBackMissing {
        frame_id: u64,
    },
    ParamApplied {
        delta: StoredDelta,
    },
    ParamStale {
        version: u64,
    },
    ParamRejected {
        version: u64,
        error: String,
    },
    Received {
        message: MessageKind,
    },
    End {
        frames: u64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotStats {
    pub warmup_frames: u64,
    /// Post-warmup frames scored.
    pub frames: u64,
    pub candidates: u64,
    pub sent: u64,
    pub evicted: u64,
    pub write_backs: u64,
    pub params_applied: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub frame_id: u64,
    pub score: f64,
    pub candidate: bool,
    pub evicted: Option<u64>,
    pub detections: Vec<crate::head::ScoredBox>,
}

pub struct RobotNode {
    cfg: RobotConfig,
    memory: VisualMemory,
    head: HeadParams,
    buffer: Arc<CandidateBuffer>,
    cache: VecDeque<(u64, FeatureTensor)>,
    log: Option<EventLog<RobotEvent>>,
    stats: RobotStats,
    scores: Vec<(u64, f64)>,
}

impl RobotNode {
    pub fn new(
        cfg: RobotConfig,
        memory: VisualMemory,
        head: HeadParams,
        log: Option<EventLog<RobotEvent>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let buffer = Arc::new(CandidateBuffer::new(cfg.buffer_capacity)?);
        let mut node = Self {
            cfg,
            memory,
            head,
            buffer,
            cache: VecDeque::new(),
            log,
            stats: RobotStats::default(),
            scores: Vec::new(),
        };
        let start = RobotEvent::Start {
            node: node.cfg.node.clone(),
            mission_id: node.cfg.mission_id.clone(),
            tau: node.cfg.tau,
            warmup: node.cfg.warmup,
            head: StoredDelta::from(&node.head.snapshot_delta()),
        };
        node.record(0, start)?;
        Ok(node)
    }

    /// Fresh memory shaped for the detector's backbone at `image_dims`.
    pub fn fresh_memory(cfg: &RobotConfig, image_dims: (u32, u32)) -> Result<VisualMemory> {
        let probe = image::RgbImage::new(image_dims.0, image_dims.1);
        let shape = extract_features(&probe, &cfg.detector.backbone)?.shape();
        VisualMemory::with_config(shape, &cfg.memory)
    }

    pub fn config(&self) -> &RobotConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &VisualMemory {
        &self.memory
    }

    pub fn head(&self) -> &HeadParams {
        &self.head
    }

    pub fn buffer(&self) -> Arc<CandidateBuffer> {
        Arc::clone(&self.buffer)
    }

    pub fn stats(&self) -> RobotStats {
        self.stats
    }

    /// `(frame_id, score)` of every post-warmup frame, in mission order.
    pub fn scores(&self) -> &[(u64, f64)] {
        &self.scores
    }

    pub fn hello(&self) -> Message {
        Message::Hello {
            node: self.cfg.node.clone(),
            mission_id: self.cfg.mission_id.clone(),
            head_version: self.head.version(),
        }
    }

    fn record(&mut self, t: u64, event: RobotEvent) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.append(t, event)?;
        }
        Ok(())
    }

    pub fn features(&self, image_bytes: &[u8]) -> Result<FeatureTensor> {
        extract_features(&decode_image(image_bytes)?, &self.cfg.detector.backbone)
    }

    /// Writes known-uninteresting frames into memory before the mission.
    pub fn warmup(&mut self, t: u64, frames: &[FeatureTensor]) -> Result<WarmupStatus> {
        let status = self.memory.warmup(frames)?;
        self.stats.warmup_frames += frames.len() as u64;
        self.record(t, RobotEvent::Warmup { frames: frames.len() })?;
        Ok(status)
    }

    /// Scores one frame; a frame at or above `tau` is buffered and cached for
    /// write-back.
    pub fn process(&mut self, t: u64, frame_id: u64, image_bytes: Vec<u8>) -> Result<FrameOutcome> {
        let image = decode_image(&image_bytes)?;
        let x = extract_features(&image, &self.cfg.detector.backbone)?;
        let score = self.memory.process_frame(&x)?.score;
        self.stats.frames += 1;
        self.scores.push((frame_id, score));
        let candidate = score >= self.cfg.tau;
        let mut evicted = None;
        if candidate {
            self.stats.candidates += 1;
            let dropped = self.buffer.push(BufferedCandidate {
                frame_id,
                score,
                t_ms: t,
                payload: image_bytes,
            })?;
            if let Some(e) = dropped {
                self.stats.evicted += 1;
                evicted = Some(e.frame_id);
                self.record(
                    t,
                    RobotEvent::Evicted {
                        frame_id: e.frame_id,
                        score: e.score,
                    },
                )?;
            }
            self.cache_features(t, frame_id, x.clone())?;
        }
        let detections = if self.cfg.detect {
            self.cfg.detector.detect_tensor(&self.head, &x, image.dimensions())?
        } else {
            Vec::new()
        };
        self.record(
            t,
            RobotEvent::Frame {
                frame_id,
                score,
                candidate,
                detections: detections.len(),
            },
        )?;
        Ok(FrameOutcome {
            frame_id,
            score,
            candidate,
            evicted,
            detections,
        })
    }

    fn cache_features(&mut self, t: u64, frame_id: u64, x: FeatureTensor) -> Result<()> {
        self.cache.retain(|(id, _)| *id != frame_id);
        self.cache.push_back((frame_id, x));
        if self.cache.len() > self.cfg.frame_cache {
            let (old, _) = self.cache.pop_front().expect("cache is non-empty");
            log::debug!("frame cache full, dropping frame {old}");
            self.record(t, RobotEvent::CacheEvicted { frame_id: old })?;
        }
        Ok(())
    }

    pub fn is_cached(&self, frame_id: u64) -> bool {
        self.cache.iter().any(|(id, _)| *id == frame_id)
    }

    /// Removes up to `n` buffered candidates, highest score first, as messages.
    pub fn take_candidates(&mut self, t: u64, n: usize) -> Result<Vec<Message>> {
        let drained = self.buffer.drain_highest(n);
        let mut out = Vec::with_capacity(drained.len());
        for c in drained {
            self.note_sent(t, c.frame_id, c.score)?;
            out.push(Message::Candidate {
                frame_id: c.frame_id,
                score: c.score,
                t_ms: c.t_ms,
                image: c.payload,
            });
        }
        Ok(out)
    }

    /// Records a candidate handed to the transport by another thread.
    pub fn note_sent(&mut self, t: u64, frame_id: u64, score: f64) -> Result<()> {
        self.stats.sent += 1;
        self.record(t, RobotEvent::Sent { frame_id, score })
    }

    /// Applies a message from the station and returns any replies.
    pub fn handle_message(&mut self, t: u64, msg: Message) -> Result<Vec<Message>> {
        match msg {
            Message::FeedbackUninteresting { frame_id } => {
                let cached = self
                    .cache
                    .iter()
                    .find(|(id, _)| *id == frame_id)
                    .map(|(_, x)| x.clone());
                match cached {
                    Some(x) => {
                        self.memory.write(&x)?;
                        self.stats.write_backs += 1;
                        self.record(t, RobotEvent::WriteBack { frame_id })?;
                    }
                    None => {
                        log::warn!("write-back for uncached frame {frame_id} ignored");
                        self.record(t, RobotEvent::WriteBackMissing { frame_id })?;
                    }
                }
                Ok(Vec::new())
            }
            Message::ParamUpdate(delta) => {
                match self.head.apply_delta(&delta) {
                    Ok(true) => {
                        self.stats.params_applied += 1;
                        self.record(
                            t,
                            RobotEvent::ParamApplied {
                                delta: StoredDelta::from(&delta),
                            },
                        )?;
                    }
                    Ok(false) => {
                        log::info!(
                            "stale delta v{} ignored (local v{})",
                            delta.version,
                            self.head.version()
                        );
                        self.record(t, RobotEvent::ParamStale { version: delta.version })?;
                    }
                    Err(e) => {
                        log::warn!("delta v{} rejected: {e}", delta.version);
                        self.record(
                            t,
                            RobotEvent::ParamRejected {
                                version: delta.version,
                                error: e.to_string(),
                            },
                        )?;
                    }
                }
                Ok(vec![Message::Ack {
                    acked: MessageKind::ParamUpdate,
                    frame_id: None,
                    version: Some(self.head.version()),
                }])
            }
            other => {
                self.record(t, RobotEvent::Received { message: other.kind() })?;
                Ok(Vec::new())
            }
        }
    }

    pub fn finish(&mut self, t: u64) -> Result<()> {
        let frames = self.stats.frames;
        self.record(t, RobotEvent::End { frames })
    }
}

/// Figures recomputed from a robot mission log alone.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotReplay {
    pub scores: Vec<(u64, f64)>,
    pub sent: Vec<u64>,
    pub warmup_frames: u64,
    pub head: Option<HeadParams>,
    pub write_backs: u64,
}

pub fn replay_robot_log(records: &[crate::store::Record<RobotEvent>]) -> Result<RobotReplay> {
    let mut out = RobotReplay {
        scores: Vec::new(),
        sent: Vec::new(),
        warmup_frames: 0,
        head: None,
        write_backs: 0,
    };
    for r in records {
        match &r.event {
            RobotEvent::Start { head, .. } => out.head = Some(HeadParams::from_delta(&head.to_delta()?)?),
            RobotEvent::Warmup { frames } => out.warmup_frames += *frames as u64,
            RobotEvent::Frame { frame_id, score, .. } => out.scores.push((*frame_id, *score)),
            RobotEvent::Sent { frame_id, .. } => out.sent.push(*frame_id),
            RobotEvent::WriteBack { .. } => out.write_backs += 1,
            RobotEvent::ParamApplied { delta } => {
                let d = delta.to_delta()?;
                match &mut out.head {
                    Some(h) => {
                        h.apply_delta(&d)?;
                    }
                    None => out.head = Some(HeadParams::from_delta(&d)?),
                }
            }
            _ => {}
        }
    }
    Ok(out)
}
