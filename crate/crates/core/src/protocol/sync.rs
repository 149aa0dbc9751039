use serde::{Deserialize, Serialize};

pub const DEFAULT_SYNC_PERIOD_MS: u64 = 30_000;

/// Decides when the station pushes a new parameter version to the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncScheduler {
    period_ms: u64,
    last_sync_ms: u64,
    acked_version: u64,
}

impl SyncScheduler {
    /// `start_ms` counts as the last sync, so the first push waits one period.
    pub fn new(period_ms: u64, start_ms: u64, acked_version: u64) -> Self {
        Self {
            period_ms: period_ms.max(1),
            last_sync_ms: start_ms,
            acked_version,
        }
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn last_sync_ms(&self) -> u64 {
        self.last_sync_ms
    }

    pub fn acked_version(&self) -> u64 {
        self.acked_version
    }

    pub fn sync_due(&self, now_ms: u64, latest_version: u64) -> bool {
        latest_version > self.acked_version && now_ms.saturating_sub(self.last_sync_ms) >= self.period_ms
    }

    pub fn record_sync(&mut self, now_ms: u64) {
        self.last_sync_ms = now_ms;
    }

    pub fn ack(&mut self, version: u64) {
        self.acked_version = self.acked_version.max(version);
    }
}
