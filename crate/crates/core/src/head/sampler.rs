//! Fine-tuning samples and the weighted-mixture minibatch sampler.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encode_box;
use crate::error::{invalid, Result};
use crate::eval::iou;
use crate::features::{roi_pool, BBox, FeatureTensor, ProposalFeature};

/// One region-level training example. `label == None` means background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSample {
    pub feature: Vec<f64>,
    pub label: Option<usize>,
    pub box_target: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotConfig {
    pub pool_grid: usize,
    /// Proposals at or above this IoU with the annotated box become foreground.
    pub fg_iou: f64,
    /// Proposals below this IoU with every annotated box become background.
    pub bg_iou: f64,
    pub max_fg: usize,
    pub max_bg: usize,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self {
            pool_grid: 3,
            fg_iou: 0.5,
            bg_iou: 0.3,
            max_fg: 3,
            max_bg: 8,
        }
    }
}

/// Region samples for one annotated box.
///
/// Emits the annotated box itself (zero regression target), the best
/// overlapping proposals as extra foreground with their regression targets, and
/// an evenly spaced selection of proposals that avoid every annotated box in
/// the image as background.
pub fn build_roi_samples(
    tensor: &FeatureTensor,
    dims: (u32, u32),
    target: &BBox,
    label: usize,
    all_annotated: &[BBox],
    proposals: &[BBox],
    cfg: &ShotConfig,
) -> Result<Vec<RoiSample>> {
    let gt = roi_pool(tensor, target, dims, cfg.pool_grid)?;
    let mut out = vec![RoiSample {
        feature: gt.vector,
        label: Some(label),
        box_target: Some([0.0; 4]),
    }];

    let mut fg: Vec<(f64, usize)> = proposals
        .iter()
        .enumerate()
        .map(|(i, p)| (iou(p, &gt.bbox), i))
        .filter(|(o, _)| *o >= cfg.fg_iou)
        .collect();
    fg.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in fg.iter().take(cfg.max_fg) {
        let p = roi_pool(tensor, &proposals[i], dims, cfg.pool_grid)?;
        out.push(RoiSample {
            feature: p.vector,
            label: Some(label),
            box_target: Some(encode_box(&p.bbox, &gt.bbox)),
        });
    }

    let bg: Vec<&BBox> = proposals
        .iter()
        .filter(|p| all_annotated.iter().all(|a| iou(p, a) < cfg.bg_iou))
        .collect();
    let take = cfg.max_bg.min(bg.len());
    for k in 0..take {
        let p = roi_pool(tensor, bg[k * bg.len() / take], dims, cfg.pool_grid)?;
        out.push(RoiSample {
            feature: p.vector,
            label: None,
            box_target: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseShot {
    pub class_id: usize,
    pub bbox: BBox,
    pub samples: Vec<RoiSample>,
}

/// An operator-annotated example of a novel class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelShot {
    pub class_id: usize,
    pub class_name: String,
    /// Path (or other reference) to the source image.
    pub image_ref: String,
    pub bbox: BBox,
    pub pooled: ProposalFeature,
    pub source_frame_id: u64,
    pub samples: Vec<RoiSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShotRef {
    Base(usize),
    Novel(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePool {
    pub base_shots: Vec<BaseShot>,
    pub novel_shots: Vec<NovelShot>,
    /// How many times each novel shot appears in the virtual pool.
    pub novel_ratio: usize,
    pub shots_per_class: usize,
}

impl SamplePool {
    pub fn new(novel_ratio: usize, shots_per_class: usize) -> Result<Self> {
        if novel_ratio == 0 {
            return Err(invalid("novel ratio must be at least 1"));
        }
        Ok(Self {
            base_shots: Vec::new(),
            novel_shots: Vec::new(),
            novel_ratio,
            shots_per_class,
        })
    }

    /// `|base| + r * |novel|`
    pub fn virtual_len(&self) -> usize {
        self.base_shots.len() + self.novel_ratio * self.novel_shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base_shots.is_empty() && self.novel_shots.is_empty()
    }

    pub fn resolve(&self, slot: usize) -> ShotRef {
        let nb = self.base_shots.len();
        if slot < nb {
            ShotRef::Base(slot)
        } else {
            ShotRef::Novel((slot - nb) / self.novel_ratio)
        }
    }

    pub fn samples(&self, r: ShotRef) -> &[RoiSample] {
        match r {
            ShotRef::Base(i) => &self.base_shots[i].samples,
            ShotRef::Novel(i) => &self.novel_shots[i].samples,
        }
    }

    /// Flattens a batch of shot references into region samples.
    pub fn batch_samples(&self, batch: &[ShotRef]) -> Vec<RoiSample> {
        batch.iter().flat_map(|&r| self.samples(r).iter().cloned()).collect()
    }

    pub fn novel_count(&self, class_id: usize) -> usize {
        self.novel_shots.iter().filter(|s| s.class_id == class_id).count()
    }
}

/// Draws `m` distinct slots of the virtual pool uniformly without replacement.
pub fn sample_minibatch<R: Rng + ?Sized>(pool: &SamplePool, m: usize, rng: &mut R) -> Result<Vec<ShotRef>> {
    if m == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let total = pool.virtual_len();
    if total < m {
        return Err(invalid(format!(
            "virtual pool of {total} slots cannot fill a batch of {m}"
        )));
    }
    Ok(index::sample(rng, total, m)
        .into_iter()
        .map(|s| pool.resolve(s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(n_base: usize, n_novel: usize, r: usize) -> SamplePool {
        let mut p = SamplePool::new(r, 1).unwrap();
        let bbox = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        p.base_shots = (0..n_base)
            .map(|i| BaseShot {
                class_id: i,
                bbox,
                samples: vec![],
            })
            .collect();
        p.novel_shots = (0..n_novel)
            .map(|i| NovelShot {
                class_id: 100 + i,
                class_name: format!("n{i}"),
                image_ref: String::new(),
                bbox,
                pooled: ProposalFeature {
                    bbox,
                    vector: vec![1.0],
                },
                source_frame_id: i as u64,
                samples: vec![],
            })
            .collect();
        p
    }

    #[test]
    fn novel_slots_repeat_r_times() {
        let p = pool(2, 1, 3);
        assert_eq!(p.virtual_len(), 5);
        let refs: Vec<ShotRef> = (0..5).map(|s| p.resolve(s)).collect();
        assert_eq!(
            refs,
            vec![
                ShotRef::Base(0),
                ShotRef::Base(1),
                ShotRef::Novel(0),
                ShotRef::Novel(0),
                ShotRef::Novel(0)
            ]
        );
    }

    #[test]
    fn single_draw_novel_probability() {
        // 2 base + 3 virtual novel slots: P(novel) = 3/5
        let p = pool(2, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| matches!(sample_minibatch(&p, 1, &mut rng).unwrap()[0], ShotRef::Novel(_)))
            .count();
        assert!((hits as f64 / n as f64 - 0.6).abs() < 0.015);
    }

    #[test]
    fn only_one_batch_when_pool_equals_m() {
        let p = pool(1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let mut b = sample_minibatch(&p, 2, &mut rng).unwrap();
            b.sort_by_key(|r| matches!(r, ShotRef::Novel(_)));
            assert_eq!(b, vec![ShotRef::Base(0), ShotRef::Novel(0)]);
        }
    }

    #[test]
    fn novel_shot_can_repeat_within_batch() {
        let p = pool(0, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_minibatch(&p, 3, &mut rng).unwrap(), vec![ShotRef::Novel(0); 3]);
    }

    #[test]
    fn undersized_pool_rejected() {
        let p = pool(1, 0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_minibatch(&p, 2, &mut rng).is_err());
        assert!(sample_minibatch(&p, 0, &mut rng).is_err());
        assert!(SamplePool::new(0, 1).is_err());
    }

    #[test]
    fn roi_samples_cover_fg_and_bg() {
        let t = FeatureTensor::new(8, 16, 16, (0..2048).map(|i| ((i * 7) % 13) as f64).collect()).unwrap();
        let target = BBox::new(8.0, 8.0, 32.0, 32.0).unwrap();
        let proposals = crate::features::generate_proposals((64, 64), &Default::default());
        let s = build_roi_samples(&t, (64, 64), &target, 2, &[target], &proposals, &ShotConfig::default()).unwrap();
        assert_eq!(s[0].label, Some(2));
        assert_eq!(s[0].box_target, Some([0.0; 4]));
        let n_fg = s.iter().filter(|r| r.label.is_some()).count();
        let n_bg = s.iter().filter(|r| r.label.is_none()).count();
        assert!((2..=4).contains(&n_fg));
        assert_eq!(n_bg, 8);
        assert!(s.iter().all(|r| r.feature.len() == 72));
    }
}
