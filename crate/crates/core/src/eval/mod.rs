//! Detection and interestingness metrics.

mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use report::{AucOpReport, MissionReport, Timings, REPORT_SCHEMA_VERSION};

use crate::error::{invalid, Error, Result};
use crate::features::BBox;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
}

/// Per-detection match flags for one class after greedy one-to-one matching,
/// in ranking order (score descending, then frame id, then input order).
fn match_detections(dets: &[Detection], gts: &[GroundTruth], class_id: usize, iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.class_id == class_id && d.score.is_finite())
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.frame_id.cmp(&b.frame_id)));

    let mut by_frame: HashMap<u64, Vec<(BBox, bool)>> = HashMap::new();
    let mut n_gt = 0;
    for g in gts.iter().filter(|g| g.class_id == class_id) {
        by_frame.entry(g.frame_id).or_default().push((g.bbox, false));
        n_gt += 1;
    }

    let flags = ranked
        .into_iter()
        .map(|d| {
            let Some(cands) = by_frame.get_mut(&d.frame_id) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (i, (b, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if o >= iou_thresh && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((i, o));
                }
            }
            match best {
                Some((i, _)) => {
                    cands[i].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

/// All-point interpolated AP from ranked hit flags.
fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .map(|(_, p)| p / n_gt as f64)
        .sum()
}

/// Area under the all-point interpolated precision/recall curve for one class.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class_id: usize, iou_thresh: f64) -> Result<f64> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(invalid(format!("IoU threshold {iou_thresh} outside (0, 1)")));
    }
    let (hits, n_gt) = match_detections(dets, gts, class_id, iou_thresh);
    Ok(interpolated_ap(&hits, n_gt))
}

/// `0.50, 0.55, ..., 0.95`, each computed as an exact decimal ratio.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Class id -> AP averaged over the COCO thresholds.
    pub per_class: BTreeMap<usize, f64>,
    /// Class id -> AP at IoU 0.5.
    pub per_class_ap50: BTreeMap<usize, f64>,
    /// Mean over classes present in the ground truth; `None` if there are none.
    pub map: Option<f64>,
    pub ap50: Option<f64>,
}

/// COCO-style mAP over `classes`, skipping classes without ground truth.
pub fn coco_map(dets: &[Detection], gts: &[GroundTruth], classes: &[usize]) -> MapResult {
    let thresholds = coco_iou_thresholds();
    let mut per_class = BTreeMap::new();
    let mut per_class_ap50 = BTreeMap::new();
    for &c in classes {
        if !gts.iter().any(|g| g.class_id == c) {
            continue;
        }
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                let (hits, n_gt) = match_detections(dets, gts, c, t);
                interpolated_ap(&hits, n_gt)
            })
            .collect();
        per_class_ap50.insert(c, aps[0]);
        per_class.insert(c, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let mean = |m: &BTreeMap<usize, f64>| (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64);
    MapResult {
        map: mean(&per_class),
        ap50: mean(&per_class_ap50),
        per_class,
        per_class_ap50,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterestPoint {
    pub frame_id: u64,
    pub score: f64,
    pub interesting: bool,
}

/// Frames in mission order with predicted scores and ground-truth labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterestSequence {
    points: Vec<InterestPoint>,
}

impl InterestSequence {
    pub fn new(points: Vec<InterestPoint>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &points {
            if !seen.insert(p.frame_id) {
                return Err(invalid(format!("duplicate frame id {}", p.frame_id)));
            }
            if !p.score.is_finite() {
                return Err(invalid(format!("non-finite score for frame {}", p.frame_id)));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[InterestPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_interesting(&self) -> usize {
        self.points.iter().filter(|p| p.interesting).count()
    }

    /// GT flags ranked by score descending, ties in mission order.
    fn ranked_flags(&self) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| self.points[b].score.total_cmp(&self.points[a].score).then(a.cmp(&b)));
        idx.into_iter().map(|i| self.points[i].interesting).collect()
    }
}

/// Area under the online precision curve with false-positive tolerance `delta`.
///
/// Only the top `ceil(delta * n_gt)` ranked frames count; each interesting frame
/// found at rank `j` within that budget contributes the precision at `j`.
pub fn auc_op(seq: &InterestSequence, delta: f64) -> Result<f64> {
    if !delta.is_finite() || delta < 1.0 {
        return Err(invalid(format!("delta must be >= 1, got {delta}")));
    }
    let n_gt = seq.n_interesting();
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("no interesting frames in the sequence".into()));
    }
    let budget = (delta * n_gt as f64).ceil() as usize;
    Ok(precision_sum(&seq.ranked_flags(), budget) / n_gt as f64)
}

fn precision_sum(flags: &[bool], budget: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &f) in flags.iter().take(budget).enumerate() {
        if f {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    sum
}

/// Non-interpolated average precision of the interestingness ranking.
pub fn ranking_average_precision(seq: &InterestSequence) -> Result<f64> {
    let n_gt = seq.n_interesting();
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("no interesting frames in the sequence".into()));
    }
    let flags = seq.ranked_flags();
    Ok(precision_sum(&flags, flags.len()) / n_gt as f64)
}

pub fn bandwidth_ratio(n_sent: usize, n_total: usize) -> Result<f64> {
    if n_total == 0 {
        return Err(invalid("bandwidth ratio needs at least one frame"));
    }
    if n_sent > n_total {
        return Err(invalid(format!("sent {n_sent} frames out of only {n_total}")));
    }
    Ok(n_sent as f64 / n_total as f64)
}
