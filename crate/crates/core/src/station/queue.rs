use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Interesting,
    Uninteresting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Interesting,
    Uninteresting,
}

impl From<Decision> for ItemStatus {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Interesting => Self::Interesting,
            Decision::Uninteresting => Self::Uninteresting,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewItem {
    pub frame_id: u64,
    pub image: Vec<u8>,
    pub score: f64,
    pub received_at: u64,
    pub status: ItemStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub received: usize,
    pub pending: usize,
    pub interesting: usize,
    pub uninteresting: usize,
}

/// Candidates in arrival order. Review is strictly first-in first-out.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    items: Vec<ReviewItem>,
    index: HashMap<u64, usize>,
    /// Position of the oldest item that may still be pending.
    head: usize,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a candidate. A repeated frame id replaces the image and score of
    /// a still-pending item in place and returns `false`.
    pub fn enqueue(&mut self, frame_id: u64, image: Vec<u8>, score: f64, received_at: u64) -> bool {
        if let Some(&i) = self.index.get(&frame_id) {
            let item = &mut self.items[i];
            if item.status == ItemStatus::Pending {
                item.image = image;
                item.score = score;
            }
            return false;
        }
        self.index.insert(frame_id, self.items.len());
        self.items.push(ReviewItem {
            frame_id,
            image,
            score,
            received_at,
            status: ItemStatus::Pending,
        });
        true
    }

    pub fn get(&self, frame_id: u64) -> Option<&ReviewItem> {
        self.index.get(&frame_id).map(|&i| &self.items[i])
    }

    pub fn next_pending(&self) -> Option<&ReviewItem> {
        self.items[self.head..].iter().find(|i| i.status == ItemStatus::Pending)
    }

    /// Moves a pending item to its final status.
    pub fn resolve(&mut self, frame_id: u64, decision: Decision) -> Result<()> {
        let i = *self
            .index
            .get(&frame_id)
            .ok_or_else(|| Error::NotFound(format!("frame {frame_id} is not in the review queue")))?;
        let item = &mut self.items[i];
        if item.status != ItemStatus::Pending {
            return Err(Error::Validation(format!("frame {frame_id} was already reviewed")));
        }
        item.status = decision.into();
        while self
            .items
            .get(self.head)
            .is_some_and(|i| i.status != ItemStatus::Pending)
        {
            self.head += 1;
        }
        Ok(())
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn counts(&self) -> QueueCounts {
        let mut c = QueueCounts {
            received: self.items.len(),
            ..Default::default()
        };
        for i in &self.items {
            match i.status {
                ItemStatus::Pending => c.pending += 1,
                ItemStatus::Interesting => c.interesting += 1,
                ItemStatus::Uninteresting => c.uninteresting += 1,
            }
        }
        c
    }
}
