//! Mission datasets: a directory of images ordered by file name plus an
//! optional `annotations.jsonl` with one line per frame.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::GroundTruth;
use crate::features::{decode_image, extract_features, generate_proposals, roi_pool, BBox};
use crate::head::{build_roi_samples, BaseShot, DetectorConfig, ShotConfig};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub class: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl AnnotatedBox {
    pub fn from_bbox(class: impl Into<String>, b: &BBox) -> Self {
        let [x, y, w, h] = b.to_xywh();
        Self {
            class: class.into(),
            x,
            y,
            w,
            h,
        }
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::from_xywh(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame: String,
    pub interesting: bool,
    #[serde(default)]
    pub boxes: Vec<AnnotatedBox>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation =
            serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        for b in &a.boxes {
            b.bbox()
                .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for a in annotations {
        serde_json::to_writer(&mut f, a)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    frames: Vec<String>,
    annotations: HashMap<String, Annotation>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut frames = Vec::new();
        for entry in fs::read_dir(&root)? {
            let path = entry?.path();
            let is_image = path.is_file()
                && path
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if is_image {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    frames.push(name.to_string());
                }
            }
        }
        frames.sort();
        let ann_path = root.join(ANNOTATIONS_FILE);
        let annotations = if ann_path.exists() {
            read_annotations(&ann_path)?
                .into_iter()
                .map(|a| (a.frame.clone(), a))
                .collect()
        } else {
            HashMap::new()
        };
        Ok(Self {
            root,
            frames,
            annotations,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_names(&self) -> &[String] {
        &self.frames
    }

    pub fn frame_name(&self, id: u64) -> Result<&str> {
        self.frames
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::NotFound(format!("frame {id}")))
    }

    pub fn frame_id(&self, name: &str) -> Option<u64> {
        self.frames
            .binary_search_by(|f| f.as_str().cmp(name))
            .ok()
            .map(|i| i as u64)
    }

    pub fn read_bytes(&self, id: u64) -> Result<Vec<u8>> {
        Ok(fs::read(self.root.join(self.frame_name(id)?))?)
    }

    pub fn load_rgb(&self, id: u64) -> Result<RgbImage> {
        decode_image(&self.read_bytes(id)?)
    }

    pub fn has_annotations(&self) -> bool {
        !self.annotations.is_empty()
    }

    pub fn annotation(&self, name: &str) -> Option<&Annotation> {
        self.annotations.get(name)
    }

    pub fn annotation_for(&self, id: u64) -> Option<&Annotation> {
        self.frame_name(id).ok().and_then(|n| self.annotation(n))
    }

    /// Ground-truth boxes keyed by frame id, with class ids resolved by `class_id`.
    /// Boxes of unknown classes are skipped.
    pub fn ground_truth(&self, class_id: impl Fn(&str) -> Option<usize>) -> Result<Vec<GroundTruth>> {
        let mut out = Vec::new();
        for (i, name) in self.frames.iter().enumerate() {
            let Some(a) = self.annotations.get(name) else {
                continue;
            };
            for b in &a.boxes {
                if let Some(c) = class_id(&b.class) {
                    out.push(GroundTruth {
                        frame_id: i as u64,
                        bbox: b.bbox()?,
                        class_id: c,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Annotated base-class images used to seed the head and the training pool.
#[derive(Debug, Clone)]
pub struct BaseSet {
    /// Class name -> pooled features of every annotated box, in first-seen order.
    pub class_features: Vec<(String, Vec<Vec<f64>>)>,
    /// One shot per annotated box, with class ids following `class_features`.
    pub shots: Vec<BaseShot>,
}

impl BaseSet {
    pub fn load(dir: &Path, detector: &DetectorConfig, shot_cfg: &ShotConfig) -> Result<Self> {
        let ds = Dataset::open(dir)?;
        let mut class_features: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
        let mut shots = Vec::new();
        for id in 0..ds.len() as u64 {
            let Some(ann) = ds.annotation_for(id) else {
                continue;
            };
            if ann.boxes.is_empty() {
                continue;
            }
            let img = ds.load_rgb(id)?;
            let dims = img.dimensions();
            let tensor = extract_features(&img, &detector.backbone)?;
            let proposals = generate_proposals(dims, &detector.anchors);
            let boxes: Vec<BBox> = ann.boxes.iter().map(AnnotatedBox::bbox).collect::<Result<_>>()?;
            for (b, bbox) in ann.boxes.iter().zip(&boxes) {
                let class_id = match class_features.iter().position(|(n, _)| n == &b.class) {
                    Some(c) => c,
                    None => {
                        class_features.push((b.class.clone(), Vec::new()));
                        class_features.len() - 1
                    }
                };
                let pooled = roi_pool(&tensor, bbox, dims, detector.pool_grid)?;
                class_features[class_id].1.push(pooled.vector);
                let samples = build_roi_samples(&tensor, dims, bbox, class_id, &boxes, &proposals, shot_cfg)?;
                shots.push(BaseShot {
                    class_id,
                    bbox: *bbox,
                    samples,
                });
            }
        }
        if class_features.is_empty() {
            return Err(invalid(format!("base set {} has no annotated boxes", dir.display())));
        }
        Ok(Self { class_features, shots })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_features.iter().map(|(n, _)| n.clone()).collect()
    }
}
