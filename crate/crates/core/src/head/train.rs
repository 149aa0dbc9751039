use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_minibatch, HeadParams, ParamDelta, RoiSample, SamplePool};
use crate::error::{invalid, Error, Result};
use crate::features::NORM_EPS;
use crate::memory::softmax;

/// Gradients with the same layout as [`HeadParams::trainables`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub class_weights: Vec<f64>,
    pub box_weights: Vec<f64>,
    pub box_bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(p: &HeadParams) -> Self {
        Self {
            class_weights: vec![0.0; p.class_weights.len()],
            box_weights: vec![0.0; p.box_weights.len()],
            box_bias: vec![0.0; p.box_bias.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 3] {
        [&self.class_weights, &self.box_weights, &self.box_bias]
    }
}

fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() < 1.0 {
        (0.5 * r * r, r)
    } else {
        (r.abs() - 0.5, r.signum())
    }
}

/// Mean softmax cross-entropy over all samples plus mean smooth-L1 (beta = 1)
/// over foreground samples that carry a box target.
pub fn loss_and_grad(p: &HeadParams, batch: &[RoiSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n = p.n_classes();
    let d = p.dim;
    for s in batch {
        p.check_feature(&s.feature)?;
        if let Some(l) = s.label {
            if l >= n {
                return Err(invalid(format!("sample label {l} is not a registered class")));
            }
        }
    }
    let mut g = Gradients::zeros_like(p);
    let row_norms: Vec<f64> = (0..=n)
        .map(|c| p.class_row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let inv_b = 1.0 / batch.len() as f64;
    let n_fg = batch
        .iter()
        .filter(|s| s.label.is_some() && s.box_target.is_some())
        .count();

    let mut ce = 0.0;
    let mut reg = 0.0;
    for s in batch {
        let f = &s.feature;
        let f_norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut cos = vec![0.0; n + 1];
        for c in 0..=n {
            if f_norm >= NORM_EPS && row_norms[c] >= NORM_EPS {
                let dot: f64 = f.iter().zip(p.class_row(c)).map(|(a, b)| a * b).sum();
                cos[c] = dot / (f_norm * row_norms[c]);
            }
        }
        let logits: Vec<f64> = cos.iter().map(|c| p.alpha * c).collect();
        let probs = softmax(&logits);
        let target = s.label.unwrap_or(n);
        ce -= probs[target].max(f64::MIN_POSITIVE).ln();

        for c in 0..=n {
            if f_norm < NORM_EPS || row_norms[c] < NORM_EPS {
                continue;
            }
            let dlogit = (probs[c] - if c == target { 1.0 } else { 0.0 }) * inv_b;
            if dlogit == 0.0 {
                continue;
            }
            let coeff = dlogit * p.alpha;
            let w = p.class_row(c);
            let a = 1.0 / (f_norm * row_norms[c]);
            let b = cos[c] / (row_norms[c] * row_norms[c]);
            let grow = &mut g.class_weights[c * d..(c + 1) * d];
            for k in 0..d {
                grow[k] += coeff * (f[k] * a - w[k] * b);
            }
        }

        if let (Some(k), Some(t)) = (s.label, s.box_target) {
            let pred = p.box_deltas(k, f);
            for j in 0..4 {
                let (l, dl) = smooth_l1(pred[j] - t[j]);
                reg += l;
                let scale = dl / n_fg as f64;
                let row = &mut g.box_weights[(k * 4 + j) * d..(k * 4 + j + 1) * d];
                for (gw, fv) in row.iter_mut().zip(f) {
                    *gw += scale * fv;
                }
                g.box_bias[k * 4 + j] += scale;
            }
        }
    }
    let mut loss = ce * inv_b;
    if n_fg > 0 {
        loss += reg / n_fg as f64;
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(u64),
    /// Wall-clock budget in milliseconds.
    TimeMs(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub budget: Budget,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            budget: Budget::Steps(200),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub params: HeadParams,
    pub steps: u64,
    pub last_loss: Option<f64>,
}

/// Lets another thread ask a running fine-tune for an interim snapshot. The
/// trainer checks the flag between steps.
#[derive(Debug, Clone, Default)]
pub struct SnapshotHandle {
    requested: Arc<AtomicBool>,
    slot: Arc<Mutex<Option<ParamDelta>>>,
}

impl SnapshotHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&self) {
        self.requested.store(true, Ordering::SeqCst);
    }

    pub fn take(&self) -> Option<ParamDelta> {
        self.slot.lock().take()
    }

    fn serve(&self, p: &HeadParams) {
        if self.requested.swap(false, Ordering::SeqCst) {
            *self.slot.lock() = Some(p.snapshot_delta());
        }
    }
}

pub fn fine_tune<R: Rng + ?Sized>(
    p: &HeadParams,
    pool: &SamplePool,
    cfg: &FineTuneConfig,
    rng: &mut R,
) -> Result<FineTuneOutcome> {
    fine_tune_with(p, pool, cfg, rng, None)
}

/// SGD with momentum over minibatches from the weighted virtual pool.
///
/// Returns the input unchanged (same version) when the pool is empty or the
/// budget allows no step. Otherwise the result is rounded to f32 precision and
/// its version is one above the input's.
pub fn fine_tune_with<R: Rng + ?Sized>(
    p: &HeadParams,
    pool: &SamplePool,
    cfg: &FineTuneConfig,
    rng: &mut R,
    snapshots: Option<&SnapshotHandle>,
) -> Result<FineTuneOutcome> {
    let unchanged = || FineTuneOutcome {
        params: p.clone(),
        steps: 0,
        last_loss: None,
    };
    if pool.is_empty() {
        return Ok(unchanged());
    }
    let m = cfg.batch_size.min(pool.virtual_len());
    let started = Instant::now();
    let budget_left = |steps: u64| match cfg.budget {
        Budget::Steps(n) => steps < n,
        Budget::TimeMs(ms) => started.elapsed() < Duration::from_millis(ms),
    };
    if !budget_left(0) {
        return Ok(unchanged());
    }

    let mut params = p.clone();
    let mut velocity = Gradients::zeros_like(&params);
    let mut steps = 0;
    let mut last_loss = None;
    while budget_left(steps) {
        let refs = sample_minibatch(pool, m, rng)?;
        let batch = pool.batch_samples(&refs);
        let (loss, grads) = loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {steps}")));
        }
        let vel = [
            &mut velocity.class_weights,
            &mut velocity.box_weights,
            &mut velocity.box_bias,
        ];
        for ((block, v), g) in params.trainables_mut().into_iter().zip(vel).zip(grads.blocks()) {
            for ((w, v), g) in block.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * *v;
            }
        }
        if !params.is_finite() {
            return Err(Error::Training(format!("non-finite parameters at step {steps}")));
        }
        steps += 1;
        last_loss = Some(loss);
        if let Some(h) = snapshots {
            h.serve(&params);
        }
    }
    params.quantize();
    params.version = p.version + 1;
    Ok(FineTuneOutcome {
        params,
        steps,
        last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{BaseShot, DEFAULT_ALPHA};
    use super::*;
    use crate::features::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn head() -> HeadParams {
        let base = vec![("a".to_string(), vec![unit(4, 0)]), ("b".to_string(), vec![unit(4, 1)])];
        HeadParams::init(&base, 4, DEFAULT_ALPHA, 3).unwrap()
    }

    #[test]
    fn perfectly_fit_batch_has_zero_loss() {
        let mut p = head();
        // target row aligned with the sample, every other row anti-aligned
        let bg = p.background_id();
        p.class_weights[bg * 4..].copy_from_slice(&[-1.0, 1.0, 0.0, 0.0]);
        p.class_weights[0..4].copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
        p.class_weights[4..8].copy_from_slice(&[-1.0, 1.0, 0.0, 0.0]);
        let batch = vec![RoiSample {
            feature: vec![2.0, -2.0, 0.0, 0.0],
            label: Some(0),
            box_target: Some([0.0; 4]),
        }];
        let (loss, g) = loss_and_grad(&p, &batch).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(g.blocks().iter().all(|b| b.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn uniform_prediction_cross_entropy() {
        let mut p = head();
        p.class_weights.iter_mut().for_each(|v| *v = 0.0);
        let batch = vec![RoiSample {
            feature: vec![0.2, 0.1, 0.3, 0.4],
            label: None,
            box_target: None,
        }];
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unregistered_label_rejected() {
        let batch = vec![RoiSample {
            feature: unit(4, 0),
            label: Some(7),
            box_target: None,
        }];
        assert!(loss_and_grad(&head(), &batch).is_err());
        assert!(loss_and_grad(&head(), &[]).is_err());
    }

    fn separable_pool() -> SamplePool {
        let bbox = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mut pool = SamplePool::new(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..8 {
            let class_id = i % 2;
            let mut f: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
            f[class_id] += 1.0;
            pool.base_shots.push(BaseShot {
                class_id,
                bbox,
                samples: vec![RoiSample {
                    feature: f,
                    label: Some(class_id),
                    box_target: Some([0.1, -0.1, 0.0, 0.05]),
                }],
            });
        }
        pool
    }

    #[test]
    fn zero_budget_and_empty_pool_are_no_ops() {
        let p = head();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FineTuneConfig {
            budget: Budget::Steps(0),
            ..Default::default()
        };
        let out = fine_tune(&p, &separable_pool(), &cfg, &mut rng).unwrap();
        assert_eq!(out.params, p);
        let out = fine_tune(
            &p,
            &SamplePool::new(1, 1).unwrap(),
            &FineTuneConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.params.version(), p.version());
    }

    #[test]
    fn separable_pool_is_learned() {
        let mut p = head();
        // start from a poor classifier
        p.class_weights[0..8].copy_from_slice(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, -0.5, 0.5]);
        let pool = separable_pool();
        let cfg = FineTuneConfig {
            batch_size: 4,
            budget: Budget::Steps(500),
            ..Default::default()
        };
        let out = fine_tune(&p, &pool, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.steps, 500);
        assert_eq!(out.params.version(), p.version() + 1);
        for shot in &pool.base_shots {
            let s = &shot.samples[0];
            let probs = out.params.forward(&s.feature).unwrap().class_scores;
            let arg = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(Some(arg), s.label);
        }
        let again = fine_tune(&p, &pool, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again.params, out.params);
    }

    #[test]
    fn interim_snapshot_served_between_steps() {
        let p = head();
        let handle = SnapshotHandle::new();
        handle.request();
        let cfg = FineTuneConfig {
            budget: Budget::Steps(3),
            batch_size: 2,
            ..Default::default()
        };
        fine_tune_with(
            &p,
            &separable_pool(),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            Some(&handle),
        )
        .unwrap();
        let snap = handle.take().expect("snapshot served");
        assert_eq!(snap.version, p.version());
        assert!(handle.take().is_none());
    }

    #[test]
    fn time_budget_runs() {
        let cfg = FineTuneConfig {
            budget: Budget::TimeMs(20),
            batch_size: 2,
            ..Default::default()
        };
        let out = fine_tune(&head(), &separable_pool(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.steps > 0);
    }
}
