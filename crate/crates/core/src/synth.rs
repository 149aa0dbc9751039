//! Procedural mission: saturated shapes over a tileable, slowly panning texture.
//!
//! Layout written by [`generate`]:
//! - `<dir>/frame_NNNNNN.png` + `annotations.jsonl`: the mission stream
//! - `<dir>/base/`: annotated images of the base classes
//! - `<dir>/eval/`: held-out annotated images for detection metrics

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_annotations, AnnotatedBox, Annotation, ANNOTATIONS_FILE};
use crate::error::{invalid, Result};
use crate::features::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Disc => "disc",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
            Self::Ring => "ring",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Self::Square => [225.0, 40.0, 35.0],
            Self::Disc => [35.0, 70.0, 230.0],
            Self::Triangle => [40.0, 200.0, 60.0],
            Self::Cross => [255.0, 240.0, 40.0],
            Self::Ring => [0.0, 235.0, 255.0],
        }
    }

    /// Whether pixel centre `(px, py)` lies inside the shape drawn in `b`.
    fn covers(self, b: &BBox, px: f64, py: f64) -> bool {
        let u = (px - b.x_min) / b.width();
        let v = (py - b.y_min) / b.height();
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
        match self {
            Self::Square => true,
            Self::Disc => r2 <= 0.25,
            Self::Triangle => (u - 0.5).abs() <= 0.5 * v,
            Self::Cross => (u - 0.5).abs() <= 0.17 || (v - 0.5).abs() <= 0.17,
            Self::Ring => (0.09..=0.25).contains(&r2),
        }
    }
}

pub const BASE_SHAPES: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];
pub const NOVEL_SHAPES: [Shape; 2] = [Shape::Cross, Shape::Ring];

/// Texture wave frequencies, in cycles per tile.
const FREQ_LO: i32 = 1;
const FREQ_HI: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: u32,
    pub n_frames: usize,
    /// Leading frames guaranteed to be plain background.
    pub warmup: usize,
    pub novel_fraction: f64,
    /// Frames between one-cell pan steps; 0 keeps the view fixed.
    pub pan_every: usize,
    pub noise_sigma: f64,
    /// Peak amplitude of each texture wave, in 8-bit levels.
    pub texture_amplitude: f64,
    pub base_per_class: usize,
    pub n_eval: usize,
    pub min_object: f64,
    pub max_object: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            size: 64,
            n_frames: 300,
            warmup: 30,
            novel_fraction: 0.1,
            pan_every: 0,
            noise_sigma: 3.0,
            texture_amplitude: 4.0,
            base_per_class: 8,
            n_eval: 40,
            min_object: 24.0,
            max_object: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_frames: usize,
    pub n_novel_frames: usize,
    pub warmup: usize,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
}

/// Sum of low-frequency sinusoids with integer frequencies over the tile, so the
/// texture wraps seamlessly and whole-cell pans are circular shifts.
struct Texture {
    size: u32,
    waves: Vec<([f64; 2], f64, [f64; 3])>,
    base: [f64; 3],
}

impl Texture {
    fn new(size: u32, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..5)
            .map(|_| {
                let f = [
                    rng.random_range(FREQ_LO..=FREQ_HI) as f64,
                    rng.random_range(0..=FREQ_HI) as f64,
                ];
                let phase = rng.random_range(0.0..TAU);
                let amp = amplitude * rng.random_range(0.5..1.0);
                let tint = [amp, amp * rng.random_range(0.8..1.0), amp * rng.random_range(0.6..0.9)];
                (f, phase, tint)
            })
            .collect();
        Self {
            size,
            waves,
            base: [118.0, 108.0, 96.0],
        }
    }

    fn render(&self, offset: (u32, u32), noise: f64, rng: &mut ChaCha8Rng) -> RgbImage {
        let n = self.size;
        let normal = Normal::new(0.0, noise.max(1e-12)).expect("positive sigma");
        RgbImage::from_fn(n, n, |x, y| {
            let tx = ((x + offset.0) % n) as f64 / n as f64;
            let ty = ((y + offset.1) % n) as f64 / n as f64;
            let mut c = self.base;
            for (f, phase, tint) in &self.waves {
                let s = (TAU * (f[0] * tx + f[1] * ty) + phase).sin();
                for k in 0..3 {
                    c[k] += tint[k] * s;
                }
            }
            let eps = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            Rgb(c.map(|v| (v + eps).round().clamp(0.0, 255.0) as u8))
        })
    }
}

fn draw(img: &mut RgbImage, shape: Shape, b: &BBox, rng: &mut ChaCha8Rng) {
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));
    let color = shape.color();
    let (w, h) = img.dimensions();
    let x0 = b.x_min.floor().max(0.0) as u32;
    let y0 = b.y_min.floor().max(0.0) as u32;
    let x1 = (b.x_max.ceil() as u32).min(w);
    let y1 = (b.y_max.ceil() as u32).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.covers(b, x as f64 + 0.5, y as f64 + 0.5) {
                let px: [u8; 3] = std::array::from_fn(|k| (color[k] + jitter[k]).clamp(0.0, 255.0) as u8);
                img.put_pixel(x, y, Rgb(px));
            }
        }
    }
}

fn random_box(size: u32, min: f64, max: f64, avoid: &[BBox], rng: &mut ChaCha8Rng) -> BBox {
    let s = size as f64;
    let mut best = None;
    for _ in 0..50 {
        let w = rng.random_range(min..=max).round();
        let h = (w * rng.random_range(0.8..1.25)).round().clamp(min, max);
        let x = rng.random_range(0.0..=(s - w)).round();
        let y = rng.random_range(0.0..=(s - h)).round();
        let b = BBox::from_xywh(x, y, w, h).expect("positive size");
        if avoid.iter().all(|a| crate::eval::iou(a, &b) == 0.0) {
            return b;
        }
        best.get_or_insert(b);
    }
    best.expect("at least one attempt")
}

fn pan_offset(t: usize, pan_every: usize, cell: u32, size: u32) -> (u32, u32) {
    if pan_every == 0 {
        return (0, 0);
    }
    let step = (t / pan_every) as u32;
    ((step * cell) % size, ((step / 3) * cell) % size)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Writes the mission, base set and evaluation set under `dir`.
pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    if cfg.size < 16 || cfg.max_object >= cfg.size as f64 || cfg.min_object > cfg.max_object {
        return Err(invalid("object size range does not fit the image"));
    }
    if !(0.0..=1.0).contains(&cfg.novel_fraction) || cfg.warmup > cfg.n_frames {
        return Err(invalid(
            "novel fraction must lie in [0, 1] and warmup within the mission",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texture = Texture::new(cfg.size, cfg.texture_amplitude, &mut rng);
    let cell = (cfg.size / 16).max(1);
    fs::create_dir_all(dir)?;

    // novel frames are spread uniformly over the post-warmup part
    let live = cfg.n_frames - cfg.warmup;
    let n_novel = (live as f64 * cfg.novel_fraction).round() as usize;
    let mut novel_at: Vec<usize> = rand::seq::index::sample(&mut rng, live, n_novel)
        .into_iter()
        .map(|i| i + cfg.warmup)
        .collect();
    novel_at.sort_unstable();

    let mut annotations = Vec::with_capacity(cfg.n_frames);
    let mut k = 0;
    for t in 0..cfg.n_frames {
        let name = format!("frame_{t:06}.png");
        let mut img = texture.render(pan_offset(t, cfg.pan_every, cell, cfg.size), cfg.noise_sigma, &mut rng);
        let mut ann = Annotation {
            frame: name.clone(),
            interesting: false,
            boxes: vec![],
        };
        if novel_at.binary_search(&t).is_ok() {
            let shape = NOVEL_SHAPES[k % NOVEL_SHAPES.len()];
            k += 1;
            let b = random_box(cfg.size, cfg.min_object, cfg.max_object, &[], &mut rng);
            draw(&mut img, shape, &b, &mut rng);
            ann.interesting = true;
            ann.boxes.push(AnnotatedBox::from_bbox(shape.name(), &b));
        }
        save(&img, &dir.join(&name))?;
        annotations.push(ann);
    }
    write_annotations(&dir.join(ANNOTATIONS_FILE), &annotations)?;

    let base_dir = dir.join("base");
    fs::create_dir_all(&base_dir)?;
    let mut base_ann = Vec::new();
    for i in 0..cfg.base_per_class * BASE_SHAPES.len() {
        let shape = BASE_SHAPES[i % BASE_SHAPES.len()];
        let off = (rng.random_range(0..16) * cell, rng.random_range(0..16) * cell);
        let mut img = texture.render(off, cfg.noise_sigma, &mut rng);
        let b = random_box(cfg.size, cfg.min_object, cfg.max_object, &[], &mut rng);
        draw(&mut img, shape, &b, &mut rng);
        let name = format!("base_{i:04}.png");
        save(&img, &base_dir.join(&name))?;
        base_ann.push(Annotation {
            frame: name,
            interesting: false,
            boxes: vec![AnnotatedBox::from_bbox(shape.name(), &b)],
        });
    }
    write_annotations(&base_dir.join(ANNOTATIONS_FILE), &base_ann)?;

    let eval_dir = dir.join("eval");
    fs::create_dir_all(&eval_dir)?;
    let mut eval_ann = Vec::new();
    let small = (cfg.min_object * 0.8).max(8.0);
    for i in 0..cfg.n_eval {
        let novel = NOVEL_SHAPES[i % NOVEL_SHAPES.len()];
        let off = (rng.random_range(0..16) * cell, rng.random_range(0..16) * cell);
        let mut img = texture.render(off, cfg.noise_sigma, &mut rng);
        let b = random_box(cfg.size, cfg.min_object, cfg.max_object, &[], &mut rng);
        draw(&mut img, novel, &b, &mut rng);
        let mut boxes = vec![AnnotatedBox::from_bbox(novel.name(), &b)];
        if i % 2 == 1 {
            let base = BASE_SHAPES[(i / 2) % BASE_SHAPES.len()];
            let c = random_box(cfg.size, small, cfg.min_object, &[b], &mut rng);
            if crate::eval::iou(&b, &c) == 0.0 {
                draw(&mut img, base, &c, &mut rng);
                boxes.push(AnnotatedBox::from_bbox(base.name(), &c));
            }
        }
        let name = format!("eval_{i:04}.png");
        save(&img, &eval_dir.join(&name))?;
        eval_ann.push(Annotation {
            frame: name,
            interesting: true,
            boxes,
        });
    }
    write_annotations(&eval_dir.join(ANNOTATIONS_FILE), &eval_ann)?;

    Ok(SynthSummary {
        n_frames: cfg.n_frames,
        n_novel_frames: n_novel,
        warmup: cfg.warmup,
        base_classes: BASE_SHAPES.iter().map(|s| s.name().to_string()).collect(),
        novel_classes: NOVEL_SHAPES.iter().map(|s| s.name().to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn small() -> SynthConfig {
        SynthConfig {
            n_frames: 40,
            warmup: 10,
            base_per_class: 2,
            n_eval: 4,
            ..Default::default()
        }
    }

    #[test]
    fn layout_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(dir.path(), &small()).unwrap();
        assert_eq!(s.n_novel_frames, 3);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 40);
        let novel: Vec<u64> = (0..40).filter(|&i| ds.annotation_for(i).unwrap().interesting).collect();
        assert_eq!(novel.len(), 3);
        assert!(novel.iter().all(|&i| i >= 10));
        assert_eq!(Dataset::open(dir.path().join("base")).unwrap().len(), 6);
        assert_eq!(Dataset::open(dir.path().join("eval")).unwrap().len(), 4);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), &small()).unwrap();
        generate(b.path(), &small()).unwrap();
        for name in ["frame_000017.png", "annotations.jsonl", "eval/eval_0003.png"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn texture_pan_is_circular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Texture::new(64, 20.0, &mut rng);
        let a = t.render((0, 0), 0.0, &mut rng);
        let b = t.render((4, 0), 0.0, &mut rng);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(b.get_pixel(x, y), a.get_pixel((x + 4) % 64, y));
            }
        }
    }

    #[test]
    fn shapes_fill_their_box() {
        let b = BBox::new(0.0, 0.0, 30.0, 30.0).unwrap();
        for s in BASE_SHAPES.iter().chain(&NOVEL_SHAPES) {
            let n = (0..30 * 30)
                .filter(|i| s.covers(&b, (i % 30) as f64 + 0.5, (i / 30) as f64 + 0.5))
                .count();
            assert!(n > 200, "{} covers {n}", s.name());
        }
    }
}
