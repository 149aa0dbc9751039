//! Trainable final detection layer over frozen features.
//!
//! Classification is a cosine classifier: each class (plus background, stored
//! as the last row) owns a weight row and the logit is `alpha * cos(f, row)`.
//! Box regression is linear per foreground class and predicts the usual
//! `(dx, dy, dw, dh)` proposal deltas.

mod delta;
mod sampler;
mod train;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use delta::{DeltaHeader, ParamDelta};
pub use sampler::{
    build_roi_samples, sample_minibatch, BaseShot, NovelShot, RoiSample, SamplePool, ShotConfig, ShotRef,
};
pub use train::{
    fine_tune, fine_tune_with, loss_and_grad, Budget, FineTuneConfig, FineTuneOutcome, Gradients, SnapshotHandle,
};

use crate::error::{invalid, Error, Result};
use crate::eval::iou;
use crate::features::{
    cosine_unchecked, extract_features, generate_proposals, l2_normalize, roi_pool, AnchorConfig, BBox, BackboneConfig,
    FeatureTensor, ProposalFeature,
};
use crate::memory::softmax;

/// Maximum number of classes that can be registered on top of the base classes.
pub const NOVEL_CAPACITY: usize = 10;
pub const DEFAULT_ALPHA: f64 = 20.0;
/// Clamp for predicted log-scale deltas, as in common two-stage detectors.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub(crate) dim: usize,
    pub(crate) alpha: f64,
    pub(crate) version: u64,
    pub(crate) n_base: usize,
    pub(crate) class_names: Vec<String>,
    /// `(n_classes + 1) x dim`, background row last.
    pub(crate) class_weights: Vec<f64>,
    /// `n_classes x 4 x dim`
    pub(crate) box_weights: Vec<f64>,
    /// `n_classes x 4`
    pub(crate) box_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Probabilities over classes then background.
    pub class_scores: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl HeadParams {
    /// Seeds class rows from per-class mean features of a base set.
    pub fn init(base: &[(String, Vec<Vec<f64>>)], dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if base.is_empty() {
            return Err(invalid("at least one base class is required"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha must be positive"));
        }
        let n = base.len();
        let mut class_weights = Vec::with_capacity((n + 1) * dim);
        let mut class_names = Vec::with_capacity(n);
        for (name, feats) in base {
            if feats.is_empty() {
                return Err(invalid(format!("base class {name:?} has no examples")));
            }
            let mut mean = vec![0.0; dim];
            for f in feats {
                if f.len() != dim {
                    return Err(invalid(format!(
                        "base feature for {name:?} has length {}, expected {dim}",
                        f.len()
                    )));
                }
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= feats.len() as f64);
            l2_normalize(&mut mean);
            class_weights.extend(mean);
            if class_names.contains(name) {
                return Err(invalid(format!("duplicate base class {name:?}")));
            }
            class_names.push(name.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bg: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(&mut bg);
        class_weights.extend(bg);
        let mut params = Self {
            dim,
            alpha,
            version: 1,
            n_base: n,
            class_names,
            class_weights,
            box_weights: vec![0.0; n * 4 * dim],
            box_bias: vec![0.0; n * 4],
        };
        params.quantize();
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_novel(&self) -> usize {
        self.class_names.len() - self.n_base
    }

    pub fn background_id(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn class_row(&self, id: usize) -> &[f64] {
        &self.class_weights[id * self.dim..(id + 1) * self.dim]
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn box_weights(&self) -> &[f64] {
        &self.box_weights
    }

    pub fn box_bias(&self) -> &[f64] {
        &self.box_bias
    }

    /// The three trainable blocks, in sync-blob order.
    pub fn trainables(&self) -> [&[f64]; 3] {
        [&self.class_weights, &self.box_weights, &self.box_bias]
    }

    pub fn trainables_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.class_weights, &mut self.box_weights, &mut self.box_bias]
    }

    pub fn is_finite(&self) -> bool {
        self.trainables().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Rounds trainables to f32 precision so the sync blob reproduces them exactly.
    pub(crate) fn quantize(&mut self) {
        for block in self.trainables_mut() {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Appends a novel class whose row starts at the first shot's feature.
    /// Returns `(class_id, created)`; an existing name returns its id untouched.
    pub fn register_novel_class(&mut self, name: &str, first_shot: &[f64]) -> Result<(usize, bool)> {
        if let Some(id) = self.class_id(name) {
            return Ok((id, false));
        }
        if self.n_novel() >= NOVEL_CAPACITY {
            return Err(Error::Capacity(format!(
                "novel class capacity of {NOVEL_CAPACITY} reached; cannot add {name:?}"
            )));
        }
        if first_shot.len() != self.dim {
            return Err(invalid(format!(
                "shot feature has length {}, expected {}",
                first_shot.len(),
                self.dim
            )));
        }
        let id = self.class_names.len();
        let mut row = first_shot.to_vec();
        l2_normalize(&mut row);
        let at = id * self.dim;
        self.class_weights.splice(at..at, row);
        self.box_weights.extend(std::iter::repeat_n(0.0, 4 * self.dim));
        self.box_bias.extend([0.0; 4]);
        self.class_names.push(name.to_string());
        self.quantize();
        self.bump_version();
        Ok((id, true))
    }

    pub(crate) fn check_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return Err(invalid(format!(
                "feature has length {}, head expects {}",
                f.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub(crate) fn logits(&self, f: &[f64]) -> Vec<f64> {
        (0..=self.n_classes())
            .map(|c| self.alpha * cosine_unchecked(f, self.class_row(c)))
            .collect()
    }

    pub(crate) fn box_deltas(&self, class: usize, f: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.box_weights[(class * 4 + j) * self.dim..(class * 4 + j + 1) * self.dim];
            *o = row.iter().zip(f).map(|(w, v)| w * v).sum::<f64>() + self.box_bias[class * 4 + j];
        }
        out
    }

    pub fn forward(&self, f: &[f64]) -> Result<HeadOutput> {
        self.check_feature(f)?;
        let class_scores = softmax(&self.logits(f));
        let deltas = (0..self.n_classes()).map(|c| self.box_deltas(c, f)).collect();
        Ok(HeadOutput { class_scores, deltas })
    }

    /// Scores proposals, drops background and low scores, refines boxes and
    /// applies per-class greedy NMS. Output is sorted by score, descending.
    pub fn detect(&self, proposals: &[ProposalFeature], score_thresh: f64, nms_iou: f64) -> Result<Vec<ScoredBox>> {
        let mut candidates = Vec::new();
        for p in proposals {
            let out = self.forward(&p.vector)?;
            let (best, &score) = out
                .class_scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least the background class");
            if best == self.background_id() || score < score_thresh {
                continue;
            }
            if let Some(bbox) = apply_deltas(&p.bbox, &out.deltas[best]) {
                candidates.push(ScoredBox {
                    bbox,
                    class_id: best,
                    score,
                });
            }
        }
        Ok(nms(candidates, nms_iou))
    }
}

/// Greedy per-class NMS; ties in score keep input order.
pub fn nms(mut boxes: Vec<ScoredBox>, iou_thresh: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || iou(&k.bbox, &b.bbox) <= iou_thresh)
        {
            kept.push(b);
        }
    }
    kept
}

/// Regression targets of `gt` relative to `proposal`.
pub fn encode_box(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (gx, gy) = gt.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [
        (gx - px) / pw,
        (gy - py) / ph,
        (gt.width() / pw).ln(),
        (gt.height() / ph).ln(),
    ]
}

/// Inverse of [`encode_box`]; `None` when the result is degenerate.
pub fn apply_deltas(proposal: &BBox, d: &[f64; 4]) -> Option<BBox> {
    if d == &[0.0; 4] {
        return Some(*proposal);
    }
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = px + d[0] * pw;
    let cy = py + d[1] * ph;
    let w = pw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ph * d[3].min(MAX_LOG_SCALE).exp();
    let b = BBox {
        x_min: (cx - 0.5 * w).max(0.0),
        y_min: (cy - 0.5 * h).max(0.0),
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    };
    b.is_valid().then_some(b)
}

/// Everything needed to go from an image to head inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub pool_grid: usize,
    pub alpha: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            anchors: AnchorConfig::default(),
            pool_grid: 3,
            alpha: DEFAULT_ALPHA,
            score_thresh: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn feature_dim(&self) -> usize {
        self.backbone.channels() * self.pool_grid * self.pool_grid
    }

    pub fn proposal_features(&self, tensor: &FeatureTensor, dims: (u32, u32)) -> Result<Vec<ProposalFeature>> {
        generate_proposals(dims, &self.anchors)
            .iter()
            .map(|b| roi_pool(tensor, b, dims, self.pool_grid))
            .collect()
    }

    pub fn detect_image(&self, params: &HeadParams, image: &RgbImage) -> Result<Vec<ScoredBox>> {
        let tensor = extract_features(image, &self.backbone)?;
        self.detect_tensor(params, &tensor, image.dimensions())
    }

    pub fn detect_tensor(
        &self,
        params: &HeadParams,
        tensor: &FeatureTensor,
        dims: (u32, u32),
    ) -> Result<Vec<ScoredBox>> {
        let proposals = self.proposal_features(tensor, dims)?;
        params.detect(&proposals, self.score_thresh, self.nms_iou)
    }

    pub fn shot_config(&self) -> ShotConfig {
        ShotConfig {
            pool_grid: self.pool_grid,
            ..ShotConfig::default()
        }
    }

    /// Pooled feature and region samples for one annotated box.
    pub fn shot_samples(
        &self,
        tensor: &FeatureTensor,
        dims: (u32, u32),
        bbox: &BBox,
        annotated: &[BBox],
        label: usize,
        shot_cfg: &ShotConfig,
    ) -> Result<(ProposalFeature, Vec<RoiSample>)> {
        let pooled = roi_pool(tensor, bbox, dims, self.pool_grid)?;
        let proposals = generate_proposals(dims, &self.anchors);
        let samples = build_roi_samples(tensor, dims, bbox, label, annotated, &proposals, shot_cfg)?;
        Ok((pooled, samples))
    }
}
