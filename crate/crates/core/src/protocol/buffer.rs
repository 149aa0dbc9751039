use parking_lot::Mutex;

use crate::error::{invalid, Result};

pub const DEFAULT_BUFFER_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedCandidate {
    pub frame_id: u64,
    pub score: f64,
    pub t_ms: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct Entry {
    cand: BufferedCandidate,
    /// Insertion order; lower is older.
    seq: u64,
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<Entry>,
    next_seq: u64,
}

/// Bounded score-ordered candidate store. When full, the lowest-score entry
/// (oldest on ties) is evicted; draining returns the highest scores first.
///
/// All operations lock an internal mutex, so a producer and a consumer can
/// share the buffer by reference.
#[derive(Debug)]
pub struct CandidateBuffer {
    capacity: usize,
    inner: Mutex<Inner>,
}

impl CandidateBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("buffer capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            inner: Mutex::new(Inner::default()),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_score(&self) -> Option<f64> {
        self.inner
            .lock()
            .entries
            .iter()
            .map(|e| e.cand.score)
            .min_by(f64::total_cmp)
    }

    pub fn contains(&self, frame_id: u64) -> bool {
        self.inner.lock().entries.iter().any(|e| e.cand.frame_id == frame_id)
    }

    /// Buffered entries in drain order, without removing them.
    pub fn snapshot(&self) -> Vec<BufferedCandidate> {
        let inner = self.inner.lock();
        let mut order: Vec<&Entry> = inner.entries.iter().collect();
        order.sort_by(|a, b| drain_order(a, b));
        order.into_iter().map(|e| e.cand.clone()).collect()
    }

    /// Inserts `cand`, returning the evicted entry if the buffer overflowed
    /// (possibly `cand` itself). A duplicate frame id updates the existing entry
    /// in place when the new score is higher and is otherwise dropped.
    pub fn push(&self, cand: BufferedCandidate) -> Result<Option<BufferedCandidate>> {
        if !(0.0..=1.0).contains(&cand.score) {
            return Err(invalid(format!("candidate score {} outside [0, 1]", cand.score)));
        }
        let mut inner = self.inner.lock();
        if let Some(e) = inner.entries.iter_mut().find(|e| e.cand.frame_id == cand.frame_id) {
            if cand.score > e.cand.score {
                e.cand = cand;
            }
            return Ok(None);
        }
        let seq = inner.next_seq;
        inner.next_seq += 1;
        inner.entries.push(Entry { cand, seq });
        if inner.entries.len() <= self.capacity {
            return Ok(None);
        }
        let victim = inner
            .entries
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.cand.score.total_cmp(&b.cand.score).then(a.seq.cmp(&b.seq)))
            .map(|(i, _)| i)
            .expect("buffer is non-empty");
        Ok(Some(inner.entries.swap_remove(victim).cand))
    }

    /// Removes up to `n` entries, highest score first, oldest first on ties.
    pub fn drain_highest(&self, n: usize) -> Vec<BufferedCandidate> {
        let mut inner = self.inner.lock();
        inner.entries.sort_by(drain_order);
        let k = n.min(inner.entries.len());
        inner.entries.drain(..k).map(|e| e.cand).collect()
    }
}

fn drain_order(a: &Entry, b: &Entry) -> std::cmp::Ordering {
    b.cand.score.total_cmp(&a.cand.score).then(a.seq.cmp(&b.seq))
}
