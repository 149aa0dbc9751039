use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Outage windows and link characteristics; times in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSchedule {
    /// Half-open `[start, end)` windows during which nothing is transmitted.
    #[serde(default)]
    pub outages: Vec<(u64, u64)>,
    #[serde(default)]
    pub latency_ms: u64,
    /// Upper bound on arrival jitter added on top of the latency.
    #[serde(default)]
    pub jitter_ms: u64,
    /// `None` means unlimited.
    #[serde(default)]
    pub bandwidth_bps: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl LinkSchedule {
    pub fn validate(&self) -> Result<()> {
        for &(s, e) in &self.outages {
            if s >= e {
                return Err(invalid(format!("outage [{s}, {e}) is empty")));
            }
        }
        for w in self.outages.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(invalid(format!(
                    "outages [{}, {}) and [{}, {}) overlap or are out of order",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        if let Some(b) = self.bandwidth_bps {
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid(format!("bandwidth {b} must be positive")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn is_up(&self, t_ms: f64) -> bool {
        !self.outages.iter().any(|&(s, e)| (s as f64) <= t_ms && t_ms < e as f64)
    }

    /// End of the outage covering `t`, or `t` itself when the link is up.
    fn next_up(&self, t: f64) -> f64 {
        self.outages
            .iter()
            .find(|&&(s, e)| (s as f64) <= t && t < e as f64)
            .map_or(t, |&(_, e)| e as f64)
    }

    /// Start of the first outage at or after `t`.
    fn next_down(&self, t: f64) -> f64 {
        self.outages
            .iter()
            .map(|&(s, _)| s as f64)
            .find(|&s| s >= t)
            .unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub bytes: Vec<u8>,
    pub sent_ms: f64,
    pub arrive_ms: f64,
}

#[derive(Debug)]
struct Queued {
    bytes: Vec<u8>,
    enqueued_ms: f64,
    transmitted: f64,
}

/// One direction of a simulated link. Messages leave in FIFO order at the
/// bandwidth cap, only while the link is up, and arrive after the latency.
/// Transmission progress carries over between calls to [`LinkSim::transfer`].
#[derive(Debug)]
pub struct LinkSim {
    schedule: LinkSchedule,
    queue: VecDeque<Queued>,
    in_flight: VecDeque<Delivered>,
    clock: f64,
    last_arrival: f64,
    rng: ChaCha8Rng,
}

impl LinkSim {
    pub fn new(schedule: LinkSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            schedule,
            queue: VecDeque::new(),
            in_flight: VecDeque::new(),
            clock: 0.0,
            last_arrival: f64::NEG_INFINITY,
        })
    }

    pub fn schedule(&self) -> &LinkSchedule {
        &self.schedule
    }

    pub fn is_up(&self, t_ms: f64) -> bool {
        self.schedule.is_up(t_ms)
    }

    pub fn send(&mut self, bytes: Vec<u8>, now_ms: f64) {
        self.queue.push_back(Queued {
            bytes,
            enqueued_ms: now_ms,
            transmitted: 0.0,
        });
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.in_flight.is_empty()
    }

    /// Advances the link over `[t0, t1]` and returns the messages that arrive
    /// by `t1`, in order.
    pub fn transfer(&mut self, t0: f64, t1: f64) -> Result<Vec<Delivered>> {
        if t0.is_nan() || t1.is_nan() || t0 >= t1 {
            return Err(invalid(format!("empty transfer window [{t0}, {t1}]")));
        }
        let rate = self.schedule.bandwidth_bps.map(|b| b / 1000.0);
        let mut t = self.clock.max(t0);
        while let Some(front) = self.queue.front_mut() {
            t = t.max(front.enqueued_ms);
            let mut done = None;
            while t < t1 {
                t = self.schedule.next_up(t);
                if t >= t1 {
                    break;
                }
                let seg_end = self.schedule.next_down(t).min(t1);
                let remaining = front.bytes.len() as f64 - front.transmitted;
                let need = rate.map_or(0.0, |r| remaining / r);
                if t + need <= seg_end {
                    t += need;
                    done = Some(t);
                    break;
                }
                front.transmitted += rate.map_or(0.0, |r| (seg_end - t) * r);
                t = seg_end;
            }
            let Some(sent) = done else {
                break;
            };
            let q = self.queue.pop_front().expect("front exists");
            let jitter = if self.schedule.jitter_ms > 0 {
                self.rng.random_range(0..=self.schedule.jitter_ms) as f64
            } else {
                0.0
            };
            let arrive = (sent + self.schedule.latency_ms as f64 + jitter).max(self.last_arrival);
            self.last_arrival = arrive;
            self.in_flight.push_back(Delivered {
                bytes: q.bytes,
                sent_ms: sent,
                arrive_ms: arrive,
            });
        }
        self.clock = t1;
        let mut out = Vec::new();
        while self.in_flight.front().is_some_and(|d| d.arrive_ms <= t1) {
            out.push(self.in_flight.pop_front().expect("front exists"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(outages: Vec<(u64, u64)>, latency_ms: u64, bandwidth_bps: Option<f64>) -> LinkSim {
        LinkSim::new(LinkSchedule {
            outages,
            latency_ms,
            bandwidth_bps,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn full_outage_delivers_nothing() {
        let mut l = link(vec![(0, 5000)], 0, Some(1000.0));
        l.send(vec![0; 10], 0.0);
        assert!(l.transfer(0.0, 5000.0).unwrap().is_empty());
        assert_eq!(l.queued(), 1);
        let d = l.transfer(5000.0, 5100.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].arrive_ms, 5010.0);
    }

    #[test]
    fn bandwidth_arithmetic() {
        let mut l = link(vec![], 0, Some(1000.0));
        l.send(vec![0; 1000], 0.0);
        let d = l.transfer(0.0, 1000.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].arrive_ms, 1000.0);
    }

    #[test]
    fn fifo_with_capacity_for_one() {
        let mut l = link(vec![], 0, Some(1000.0));
        l.send(vec![1; 600], 0.0);
        l.send(vec![2; 600], 0.0);
        let d = l.transfer(0.0, 1000.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bytes[0], 1);
        assert_eq!(l.queued(), 1);
        let d = l.transfer(1000.0, 2000.0).unwrap();
        assert_eq!(d[0].bytes[0], 2);
        assert_eq!(d[0].arrive_ms, 1200.0);
    }

    #[test]
    fn progress_pauses_during_outage() {
        let mut l = link(vec![(500, 1500)], 0, Some(1000.0));
        l.send(vec![0; 1000], 0.0);
        let d = l.transfer(0.0, 3000.0).unwrap();
        assert_eq!(d[0].arrive_ms, 2000.0);
    }

    #[test]
    fn latency_holds_message_in_flight() {
        let mut l = link(vec![], 250, None);
        l.send(vec![7], 100.0);
        assert!(l.transfer(0.0, 300.0).unwrap().is_empty());
        assert_eq!(l.in_flight(), 1);
        let d = l.transfer(300.0, 400.0).unwrap();
        assert_eq!(d[0].arrive_ms, 350.0);
        assert!(l.is_idle());
    }

    #[test]
    fn jitter_is_deterministic_and_fifo() {
        let run = || {
            let mut l = LinkSim::new(LinkSchedule {
                latency_ms: 10,
                jitter_ms: 50,
                seed: 3,
                ..Default::default()
            })
            .unwrap();
            for i in 0..20u8 {
                l.send(vec![i], i as f64);
            }
            l.transfer(0.0, 1000.0).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a
            .windows(2)
            .all(|w| w[0].arrive_ms <= w[1].arrive_ms && w[0].bytes[0] < w[1].bytes[0]));
    }

    #[test]
    fn schedule_validation() {
        let bad = |outages| {
            LinkSim::new(LinkSchedule {
                outages,
                ..Default::default()
            })
            .is_err()
        };
        assert!(bad(vec![(5, 5)]));
        assert!(bad(vec![(0, 10), (5, 20)]));
        assert!(bad(vec![(30, 40), (0, 10)]));
        assert!(!bad(vec![(0, 10), (10, 20)]));
        let s: LinkSchedule = serde_json::from_str(r#"{"outages": [[1000, 2000]], "latency_ms": 20}"#).unwrap();
        assert!(!s.is_up(1500.0));
        assert!(s.is_up(2000.0));
        let mut l = link(vec![], 0, None);
        assert!(l.transfer(5.0, 5.0).is_err());
    }
}
