use serde::{Deserialize, Serialize};

use super::tensor::{BBox, FeatureTensor};
use crate::error::{invalid, Result};

/// Pooled descriptor of one image region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFeature {
    pub bbox: BBox,
    pub vector: Vec<f64>,
}

/// Fixed-grid average pooling of `tensor` under `bbox`, L2-normalised.
///
/// `image_dims` is `(w, h)` of the image the tensor was extracted from. Each of
/// the `grid x grid` sub-cells averages the tensor cells whose centres fall inside
/// it; a sub-cell too small to contain a centre takes the cell under its own centre.
pub fn roi_pool(tensor: &FeatureTensor, bbox: &BBox, image_dims: (u32, u32), grid: usize) -> Result<ProposalFeature> {
    if grid == 0 {
        return Err(invalid("pooling grid must be at least 1"));
    }
    let (img_w, img_h) = (image_dims.0 as f64, image_dims.1 as f64);
    if img_w <= 0.0 || img_h <= 0.0 {
        return Err(invalid("image dimensions must be positive"));
    }
    let clipped = bbox
        .clip(img_w, img_h)
        .ok_or_else(|| invalid(format!("box {bbox:?} has no area inside the image")))?;

    let (tw, th) = (tensor.width(), tensor.height());
    let sx = tw as f64 / img_w;
    let sy = th as f64 / img_h;
    let (x0, x1) = (clipped.x_min * sx, clipped.x_max * sx);
    let (y0, y1) = (clipped.y_min * sy, clipped.y_max * sy);
    let step_x = (x1 - x0) / grid as f64;
    let step_y = (y1 - y0) / grid as f64;

    let cells = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        // cells k with lo <= k + 0.5 < hi
        let first = (lo - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
        if first < last {
            (first, last)
        } else {
            let k = ((0.5 * (lo + hi)).floor().max(0.0) as usize).min(n - 1);
            (k, k + 1)
        }
    };

    let mut vector = Vec::with_capacity(tensor.channels() * grid * grid);
    for c in 0..tensor.channels() {
        for gy in 0..grid {
            let (ya, yb) = cells(y0 + gy as f64 * step_y, y0 + (gy + 1) as f64 * step_y, th);
            for gx in 0..grid {
                let (xa, xb) = cells(x0 + gx as f64 * step_x, x0 + (gx + 1) as f64 * step_x, tw);
                let mut sum = 0.0;
                for y in ya..yb {
                    for x in xa..xb {
                        sum += tensor.get(c, y, x);
                    }
                }
                vector.push(sum / ((yb - ya) * (xb - xa)) as f64);
            }
        }
    }
    l2_normalize(&mut vector);
    Ok(ProposalFeature { bbox: clipped, vector })
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n >= super::similarity::NORM_EPS {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor sizes as fractions of the shorter image side.
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub aspect_ratios: Vec<f64>,
    /// Centre spacing as a fraction of the shorter image side.
    pub stride_fraction: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.25, 0.5, 0.75],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride_fraction: 1.0 / 8.0,
        }
    }
}

/// Dense anchor grid. Centres sit at `(k + 0.5) * stride` along each axis; for
/// every centre the anchors are emitted scale-major, then ratio. Boxes are clipped
/// to the image and exact duplicates after clipping are dropped.
pub fn generate_proposals(image_dims: (u32, u32), config: &AnchorConfig) -> Vec<BBox> {
    let (w, h) = (image_dims.0 as f64, image_dims.1 as f64);
    let min_dim = w.min(h);
    let stride = config.stride_fraction * min_dim;
    if min_dim <= 0.0 || stride.is_nan() || stride <= 0.0 {
        return Vec::new();
    }
    let centres = |len: f64| -> Vec<f64> {
        (0..)
            .map(|k| (k as f64 + 0.5) * stride)
            .take_while(|&c| c < len)
            .collect()
    };
    let (cxs, cys) = (centres(w), centres(h));
    let mut out: Vec<BBox> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &cy in &cys {
        for &cx in &cxs {
            for &scale in &config.scales {
                let size = scale * min_dim;
                for &ratio in &config.aspect_ratios {
                    let bw = size / ratio.sqrt();
                    let bh = size * ratio.sqrt();
                    let raw = BBox {
                        x_min: cx - 0.5 * bw,
                        y_min: cy - 0.5 * bh,
                        x_max: cx + 0.5 * bw,
                        y_max: cy + 0.5 * bh,
                    };
                    if let Some(b) = raw.clip(w, h) {
                        let key = [b.x_min, b.y_min, b.x_max, b.y_max].map(f64::to_bits);
                        if seen.insert(key) {
                            out.push(b);
                        }
                    }
                }
            }
        }
    }
    out
}
