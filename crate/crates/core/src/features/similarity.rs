use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::tensor::FeatureTensor;
use crate::error::{invalid, Result};

/// Norms below this are treated as zero and yield similarity 0.
pub const NORM_EPS: f64 = 1e-12;

/// Correlation peaks closer than this are considered tied.
const TIE_EPS: f64 = 1e-12;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftMatch {
    pub similarity: f64,
    /// Displacement such that `m ~= x.roll(dy, dx)`.
    pub dy: usize,
    pub dx: usize,
}

/// Per-channel 2-D spectrum of a tensor plus its norm.
#[derive(Debug, Clone)]
pub struct Spectrum {
    shape: (usize, usize, usize),
    bins: Vec<Complex<f64>>,
    norm: f64,
}

/// FFT plans for one spatial size, reusable across many correlations.
#[derive(Clone)]
pub struct ShiftCorrelator {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ShiftCorrelator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShiftCorrelator")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl ShiftCorrelator {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn fft2(&self, plane: &mut [Complex<f64>], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (w, h) = (self.width, self.height);
        row.process(plane);
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }

    pub fn spectrum(&self, t: &FeatureTensor) -> Result<Spectrum> {
        if t.width() != self.width || t.height() != self.height {
            return Err(invalid(format!(
                "tensor is {}x{}, correlator expects {}x{}",
                t.width(),
                t.height(),
                self.width,
                self.height
            )));
        }
        let plane = self.width * self.height;
        let mut bins: Vec<Complex<f64>> = t.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
        for c in 0..t.channels() {
            self.fft2(&mut bins[c * plane..(c + 1) * plane], &self.row_fwd, &self.col_fwd);
        }
        Ok(Spectrum {
            shape: t.shape(),
            bins,
            norm: t.norm(),
        })
    }

    /// Maximum cosine similarity between `x` and every circular translation of `m`.
    pub fn best_shift(&self, x: &Spectrum, m: &Spectrum) -> Result<ShiftMatch> {
        if x.shape != m.shape {
            return Err(invalid(format!("shape mismatch: {:?} vs {:?}", x.shape, m.shape)));
        }
        if x.norm < NORM_EPS || m.norm < NORM_EPS {
            return Ok(ShiftMatch {
                similarity: 0.0,
                dy: 0,
                dx: 0,
            });
        }
        let (w, h) = (self.width, self.height);
        let plane = w * h;
        let mut acc = vec![Complex::new(0.0, 0.0); plane];
        for c in 0..x.shape.0 {
            let xs = &x.bins[c * plane..(c + 1) * plane];
            let ms = &m.bins[c * plane..(c + 1) * plane];
            for ((a, xv), mv) in acc.iter_mut().zip(xs).zip(ms) {
                *a += xv * mv.conj();
            }
        }
        self.fft2(&mut acc, &self.row_inv, &self.col_inv);
        // acc[k] = plane * sum_j x[j] m[j - k]: the numerator for m rolled by k.
        // Rolling m by k aligns it with x when m = x rolled by -k.
        let scale = 1.0 / (plane as f64 * x.norm * m.norm);
        let mut best = ShiftMatch {
            similarity: f64::NEG_INFINITY,
            dy: 0,
            dx: 0,
        };
        for dy in 0..h {
            for dx in 0..w {
                let ky = (h - dy) % h;
                let kx = (w - dx) % w;
                let s = acc[ky * w + kx].re * scale;
                if s > best.similarity + TIE_EPS {
                    best = ShiftMatch { similarity: s, dy, dx };
                }
            }
        }
        best.similarity = best.similarity.clamp(-1.0, 1.0);
        Ok(best)
    }
}

pub fn max_shift_sim(x: &FeatureTensor, m: &FeatureTensor) -> Result<ShiftMatch> {
    if x.shape() != m.shape() {
        return Err(invalid(format!("shape mismatch: {:?} vs {:?}", x.shape(), m.shape())));
    }
    let corr = ShiftCorrelator::new(x.width(), x.height());
    corr.best_shift(&corr.spectrum(x)?, &corr.spectrum(m)?)
}
