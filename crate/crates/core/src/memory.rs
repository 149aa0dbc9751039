//! Online visual memory for unsupervised interestingness.
//!
//! A memory holds `N` cubes shaped like the scene tensors. Writing blends the
//! scene into every cube with softmax weights that favour the cubes already most
//! similar to it. Reading recalls a softmax-weighted mixture of cubes, where the
//! weights come from the best circular-translation similarity of each cube, and
//! reports how well the recall matches the scene.

use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::{cosine_unchecked, l2_normalize, FeatureTensor, ShiftCorrelator};

/// Upper clamp for similarities fed to `tan(pi/2 * s)`.
pub const SIM_CEILING: f64 = 1.0 - 1e-6;
const INIT_NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub n_cubes: usize,
    pub gamma_w: f64,
    pub gamma_v: f64,
    pub seed: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            n_cubes: 10,
            gamma_w: 5.0,
            gamma_v: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InterestResult {
    /// `1 - confidence`; high for poorly recalled scenes.
    pub score: f64,
    pub confidence: f64,
    pub recalled: FeatureTensor,
    /// Reading weights over the cubes.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupStatus {
    Applied(usize),
    /// Nothing to learn from; the memory is unchanged.
    Empty,
}

#[derive(Debug, Clone)]
pub struct VisualMemory {
    cubes: Vec<FeatureTensor>,
    gamma_w: f64,
    gamma_v: f64,
    n_writes: u64,
    correlator: ShiftCorrelator,
}

impl PartialEq for VisualMemory {
    fn eq(&self, other: &Self) -> bool {
        self.cubes == other.cubes
            && self.gamma_w == other.gamma_w
            && self.gamma_v == other.gamma_v
            && self.n_writes == other.n_writes
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softmax(gain * tan(pi/2 * clamp(s, 0, 1 - 1e-6)))`
pub fn similarity_weights(similarities: &[f64], gain: f64) -> Vec<f64> {
    let logits: Vec<f64> = similarities
        .iter()
        .map(|s| gain * (FRAC_PI_2 * s.clamp(0.0, SIM_CEILING)).tan())
        .collect();
    softmax(&logits)
}

impl VisualMemory {
    pub fn new(n_cubes: usize, shape: (usize, usize, usize), gamma_w: f64, gamma_v: f64, seed: u64) -> Result<Self> {
        if n_cubes == 0 {
            return Err(invalid("memory needs at least one cube"));
        }
        check_gains(gamma_w, gamma_v)?;
        let (c, w, h) = shape;
        if c == 0 || w == 0 || h == 0 {
            return Err(invalid(format!("invalid cube shape {shape:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, INIT_NOISE_STD).expect("valid normal parameters");
        let cubes = (0..n_cubes)
            .map(|_| {
                let mut data: Vec<f64> = (0..c * w * h).map(|_| noise.sample(&mut rng)).collect();
                l2_normalize(&mut data);
                FeatureTensor::new(c, w, h, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_cubes_unchecked(cubes, gamma_w, gamma_v, 0))
    }

    pub fn with_config(shape: (usize, usize, usize), cfg: &MemoryConfig) -> Result<Self> {
        Self::new(cfg.n_cubes, shape, cfg.gamma_w, cfg.gamma_v, cfg.seed)
    }

    /// Builds a memory from explicit cube contents.
    pub fn from_cubes(cubes: Vec<FeatureTensor>, gamma_w: f64, gamma_v: f64) -> Result<Self> {
        check_gains(gamma_w, gamma_v)?;
        let first = cubes.first().ok_or_else(|| invalid("memory needs at least one cube"))?;
        if cubes.iter().any(|c| c.shape() != first.shape()) {
            return Err(invalid("all cubes must share one shape"));
        }
        Ok(Self::from_cubes_unchecked(cubes, gamma_w, gamma_v, 0))
    }

    fn from_cubes_unchecked(cubes: Vec<FeatureTensor>, gamma_w: f64, gamma_v: f64, n_writes: u64) -> Self {
        let correlator = ShiftCorrelator::new(cubes[0].width(), cubes[0].height());
        Self {
            cubes,
            gamma_w,
            gamma_v,
            n_writes,
            correlator,
        }
    }

    pub fn cubes(&self) -> &[FeatureTensor] {
        &self.cubes
    }

    pub fn n_cubes(&self) -> usize {
        self.cubes.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.cubes[0].shape()
    }

    pub fn gamma_w(&self) -> f64 {
        self.gamma_w
    }

    pub fn gamma_v(&self) -> f64 {
        self.gamma_v
    }

    pub fn n_writes(&self) -> u64 {
        self.n_writes
    }

    fn check_shape(&self, x: &FeatureTensor) -> Result<()> {
        if x.shape() != self.shape() {
            return Err(invalid(format!(
                "scene shape {:?} does not match memory shape {:?}",
                x.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    /// Blends `x` into every cube and returns the writing weights.
    pub fn write(&mut self, x: &FeatureTensor) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let sims: Vec<f64> = self
            .cubes
            .iter()
            .map(|m| cosine_unchecked(x.data(), m.data()))
            .collect();
        let weights = similarity_weights(&sims, self.gamma_w);
        for (cube, &w) in self.cubes.iter_mut().zip(&weights) {
            for (m, v) in cube.data_mut().iter_mut().zip(x.data()) {
                *m = (1.0 - w) * *m + w * v;
            }
        }
        self.n_writes += 1;
        Ok(weights)
    }

    pub fn read(&self, x: &FeatureTensor) -> Result<InterestResult> {
        self.check_shape(x)?;
        let xs = self.correlator.spectrum(x)?;
        let matches = self
            .cubes
            .iter()
            .map(|m| self.correlator.best_shift(&xs, &self.correlator.spectrum(m)?))
            .collect::<Result<Vec<_>>>()?;
        let sims: Vec<f64> = matches.iter().map(|s| s.similarity).collect();
        let weights = similarity_weights(&sims, self.gamma_v);
        // each cube contributes at the translation that best matches x
        let (_, w, h) = x.shape();
        let mut recalled = vec![0.0; x.data().len()];
        for ((cube, &v), s) in self.cubes.iter().zip(&weights).zip(&matches) {
            let aligned = cube.roll((h - s.dy) % h, (w - s.dx) % w);
            for (f, m) in recalled.iter_mut().zip(aligned.data()) {
                *f += v * m;
            }
        }
        let confidence = cosine_unchecked(&recalled, x.data()).clamp(0.0, 1.0);
        let (c, w, h) = x.shape();
        Ok(InterestResult {
            score: 1.0 - confidence,
            confidence,
            recalled: FeatureTensor::from_parts(c, w, h, recalled),
            weights,
        })
    }

    /// Writes the scene first, then reads it back from the updated memory.
    pub fn process_frame(&mut self, x: &FeatureTensor) -> Result<InterestResult> {
        self.write(x)?;
        self.read(x)
    }

    pub fn warmup<'a, I>(&mut self, frames: I) -> Result<WarmupStatus>
    where
        I: IntoIterator<Item = &'a FeatureTensor>,
    {
        let mut n = 0;
        for frame in frames {
            self.write(frame)?;
            n += 1;
        }
        if n == 0 {
            log::warn!("memory warmup called with no frames");
            return Ok(WarmupStatus::Empty);
        }
        Ok(WarmupStatus::Applied(n))
    }

    /// Snapshot layout: `N, C, W, H` as u32 LE, `gamma_w, gamma_v` as f64 LE,
    /// then every cube's entries as f64 LE in cube order.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let (c, w, h) = self.shape();
        for v in [self.cubes.len(), c, w, h] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&self.gamma_w.to_le_bytes())?;
        out.write_all(&self.gamma_v.to_le_bytes())?;
        for cube in &self.cubes {
            for v in cube.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 4];
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            input.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let mut dword = [0u8; 8];
        input.read_exact(&mut dword)?;
        let gamma_w = f64::from_le_bytes(dword);
        input.read_exact(&mut dword)?;
        let gamma_v = f64::from_le_bytes(dword);
        let [n, c, w, h] = dims;
        if n == 0 {
            return Err(invalid("snapshot holds no cubes"));
        }
        let mut cubes = Vec::with_capacity(n);
        for _ in 0..n {
            let mut data = Vec::with_capacity(c * w * h);
            for _ in 0..c * w * h {
                input.read_exact(&mut dword)?;
                data.push(f64::from_le_bytes(dword));
            }
            cubes.push(FeatureTensor::new(c, w, h, data)?);
        }
        Self::from_cubes(cubes, gamma_w, gamma_v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_snapshot(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn check_gains(gamma_w: f64, gamma_v: f64) -> Result<()> {
    if !(gamma_w > 0.0 && gamma_w.is_finite() && gamma_v > 0.0 && gamma_v.is_finite()) {
        return Err(invalid(format!(
            "memory gains must be positive, got gamma_w={gamma_w} gamma_v={gamma_v}"
        )));
    }
    Ok(())
}
