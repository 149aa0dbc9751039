use std::collections::HashMap;
use std::path::Path;

use crate::dataset::{read_annotations, AnnotatedBox, Annotation, Dataset};
use crate::error::Result;

use super::queue::Decision;

pub const DEFAULT_ORACLE_BUDGET: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleAnswer {
    pub decision: Decision,
    pub boxes: Vec<AnnotatedBox>,
}

/// Scripted operator answering from ground truth under a per-class budget of
/// annotated scenes.
#[derive(Debug, Clone)]
pub struct OracleOperator {
    by_id: HashMap<u64, Annotation>,
    budget: usize,
    used: HashMap<String, usize>,
}

impl OracleOperator {
    /// Frame ids follow the lexicographic order of the annotated frame names,
    /// which matches [`Dataset`] ordering when every frame has a line.
    pub fn new(mut annotations: Vec<Annotation>, budget: usize) -> Self {
        annotations.sort_by(|a, b| a.frame.cmp(&b.frame));
        let by_id = annotations
            .into_iter()
            .enumerate()
            .map(|(i, a)| (i as u64, a))
            .collect();
        Self {
            by_id,
            budget,
            used: HashMap::new(),
        }
    }

    pub fn load(path: &Path, budget: usize) -> Result<Self> {
        Ok(Self::new(read_annotations(path)?, budget))
    }

    /// Uses the dataset's own frame ids.
    pub fn from_dataset(ds: &Dataset, budget: usize) -> Self {
        let by_id = (0..ds.len() as u64)
            .filter_map(|id| ds.annotation_for(id).map(|a| (id, a.clone())))
            .collect();
        Self {
            by_id,
            budget,
            used: HashMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self, class: &str) -> usize {
        self.used.get(class).copied().unwrap_or(0)
    }

    /// Interesting with the ground-truth boxes of every class whose budget is
    /// not yet spent; uninteresting otherwise.
    pub fn decide(&mut self, frame_id: u64) -> OracleAnswer {
        let uninteresting = OracleAnswer {
            decision: Decision::Uninteresting,
            boxes: Vec::new(),
        };
        let Some(ann) = self.by_id.get(&frame_id) else {
            log::warn!("oracle has no ground truth for frame {frame_id}; answering uninteresting");
            return uninteresting;
        };
        if !ann.interesting {
            return uninteresting;
        }
        let boxes: Vec<AnnotatedBox> = ann
            .boxes
            .iter()
            .filter(|b| self.used(&b.class) < self.budget)
            .cloned()
            .collect();
        if boxes.is_empty() {
            return uninteresting;
        }
        let mut classes: Vec<&str> = boxes.iter().map(|b| b.class.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            *self.used.entry(c.to_string()).or_insert(0) += 1;
        }
        OracleAnswer {
            decision: Decision::Interesting,
            boxes,
        }
    }
}
