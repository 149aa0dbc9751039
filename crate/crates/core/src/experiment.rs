//! Offline few-shot fine-tuning runs on a generated synthetic mission.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedBox, BaseSet, Dataset};
use crate::error::Result;
use crate::eval::{coco_map, Detection, MapResult};
use crate::features::{extract_features, roi_pool, BBox};
use crate::head::{fine_tune, Budget, DetectorConfig, FineTuneConfig, HeadParams, NovelShot, SamplePool};
use crate::synth::{generate, SynthConfig};

/// Runs the detector over every frame of `ds`.
pub fn detect_dataset(detector: &DetectorConfig, params: &HeadParams, ds: &Dataset) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for id in 0..ds.len() as u64 {
        let img = ds.load_rgb(id)?;
        for d in detector.detect_image(params, &img)? {
            out.push(Detection {
                frame_id: id,
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(detector: &DetectorConfig, params: &HeadParams, ds: &Dataset, classes: &[usize]) -> Result<MapResult> {
    let dets = detect_dataset(detector, params, ds)?;
    let gts = ds.ground_truth(|c| params.class_id(c))?;
    Ok(coco_map(&dets, &gts, classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub shots_per_class: usize,
    pub novel_ratio: usize,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub seed: u64,
    pub novel_ratio: usize,
    pub novel_map: Option<f64>,
    pub novel_ap50: Option<f64>,
    pub all_map: Option<f64>,
}

/// Initializes the head from the base set, registers the first `K` annotated
/// frames of each novel class from the mission stream, fine-tunes and scores
/// on the held-out evaluation set.
pub fn run_few_shot(dir: &Path, detector: &DetectorConfig, cfg: &FewShotConfig) -> Result<FewShotResult> {
    let shot_cfg = detector.shot_config();
    let base = BaseSet::load(&dir.join("base"), detector, &shot_cfg)?;
    let mut params = HeadParams::init(&base.class_features, detector.feature_dim(), detector.alpha, cfg.seed)?;
    let mut pool = SamplePool::new(cfg.novel_ratio, cfg.shots_per_class)?;
    pool.base_shots = base.shots;

    let mission = Dataset::open(dir)?;
    for id in 0..mission.len() as u64 {
        let Some(ann) = mission.annotation_for(id) else {
            continue;
        };
        if !ann.interesting || ann.boxes.is_empty() {
            continue;
        }
        let image = mission.load_rgb(id)?;
        let boxes: Vec<BBox> = ann.boxes.iter().map(AnnotatedBox::bbox).collect::<Result<_>>()?;
        for (b, bbox) in ann.boxes.iter().zip(&boxes) {
            let known = params.class_id(&b.class);
            if known.is_some_and(|c| pool.novel_count(c) >= cfg.shots_per_class) {
                continue;
            }
            let tensor = extract_features(&image, &detector.backbone)?;
            let dims = image.dimensions();
            let first = roi_pool(&tensor, bbox, dims, detector.pool_grid)?;
            let (class_id, _) = params.register_novel_class(&b.class, &first.vector)?;
            let (pooled, samples) = detector.shot_samples(&tensor, dims, bbox, &boxes, class_id, &shot_cfg)?;
            pool.novel_shots.push(NovelShot {
                class_id,
                class_name: b.class.clone(),
                image_ref: mission.frame_name(id)?.to_string(),
                bbox: *bbox,
                pooled,
                source_frame_id: id,
                samples,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ft = FineTuneConfig {
        budget: Budget::Steps(cfg.steps),
        ..FineTuneConfig::default()
    };
    let trained = fine_tune(&params, &pool, &ft, &mut rng)?.params;

    let eval = Dataset::open(dir.join("eval"))?;
    let novel: Vec<usize> = (trained.n_base()..trained.n_classes()).collect();
    let all: Vec<usize> = (0..trained.n_classes()).collect();
    let novel_res = evaluate(detector, &trained, &eval, &novel)?;
    let all_res = evaluate(detector, &trained, &eval, &all)?;
    Ok(FewShotResult {
        seed: cfg.seed,
        novel_ratio: cfg.novel_ratio,
        novel_map: novel_res.map,
        novel_ap50: novel_res.ap50,
        all_map: all_res.map,
    })
}

/// Generates the synthetic mission for `seed` under `root` and runs
/// [`run_few_shot`] once per novel ratio on the same data.
pub fn ratio_sweep(root: &Path, seed: u64, ratios: &[usize], steps: u64, shots: usize) -> Result<Vec<FewShotResult>> {
    let dir = root.join(format!("seed_{seed}"));
    generate(
        &dir,
        &SynthConfig {
            seed,
            ..SynthConfig::default()
        },
    )?;
    let detector = DetectorConfig::default();
    ratios
        .iter()
        .map(|&r| {
            run_few_shot(
                &dir,
                &detector,
                &FewShotConfig {
                    shots_per_class: shots,
                    novel_ratio: r,
                    steps,
                    seed,
                },
            )
        })
        .collect()
}
