//! Deterministic patch-statistics feature extractor.
//!
//! The image is split into a `grid_w x grid_h` lattice of cells and each cell is
//! summarised by a fixed list of statistics (one output channel each). Every
//! channel is then standardised over the whole tensor. The computation uses only
//! integer pixel indexing and sequential f64 sums, so the robot and the station
//! produce bit-identical tensors from the same image bytes.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::tensor::FeatureTensor;
use crate::error::{invalid, Result};

const ORIENTATION_BINS: usize = 8;
const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelStat {
    MeanR,
    MeanG,
    MeanB,
    StdR,
    StdG,
    StdB,
    GradientMagnitude,
    OrientationEntropy,
}

impl ChannelStat {
    pub const DEFAULT: [ChannelStat; 8] = [
        ChannelStat::MeanR,
        ChannelStat::MeanG,
        ChannelStat::MeanB,
        ChannelStat::StdR,
        ChannelStat::StdG,
        ChannelStat::StdB,
        ChannelStat::GradientMagnitude,
        ChannelStat::OrientationEntropy,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub stats: Vec<ChannelStat>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            grid_w: 16,
            grid_h: 16,
            stats: ChannelStat::DEFAULT.to_vec(),
        }
    }
}

impl BackboneConfig {
    pub fn channels(&self) -> usize {
        self.stats.len()
    }
}

/// Pixel range `[lo, hi)` covered by cell `i` of `n` along an axis of `len` pixels.
/// Always non-empty, even when the image is smaller than the grid.
pub(crate) fn cell_span(i: usize, n: usize, len: usize) -> (usize, usize) {
    let lo = (i * len / n).min(len - 1);
    let hi = ((i + 1) * len / n).max(lo + 1).min(len);
    (lo, hi)
}

struct Planes {
    width: usize,
    height: usize,
    rgb: [Vec<f64>; 3],
    grad_mag: Vec<f64>,
    grad_bin: Vec<usize>,
}

impl Planes {
    fn new(image: &RgbImage) -> Self {
        let (width, height) = (image.width() as usize, image.height() as usize);
        let n = width * height;
        let mut rgb = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut luma = vec![0.0; n];
        for (x, y, px) in image.enumerate_pixels() {
            let i = y as usize * width + x as usize;
            for (k, plane) in rgb.iter_mut().enumerate() {
                plane[i] = px.0[k] as f64 / 255.0;
            }
            luma[i] = 0.299 * rgb[0][i] + 0.587 * rgb[1][i] + 0.114 * rgb[2][i];
        }

        let mut grad_mag = vec![0.0; n];
        let mut grad_bin = vec![0; n];
        for y in 0..height {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(height - 1));
            for x in 0..width {
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(width - 1));
                let gx = 0.5 * (luma[y * width + xp] - luma[y * width + xm]);
                let gy = 0.5 * (luma[yp * width + x] - luma[ym * width + x]);
                let mag = (gx * gx + gy * gy).sqrt();
                let i = y * width + x;
                grad_mag[i] = mag;
                // unsigned orientation in [0, pi)
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += std::f64::consts::PI;
                }
                let bin = (theta / std::f64::consts::PI * ORIENTATION_BINS as f64) as usize;
                grad_bin[i] = bin.min(ORIENTATION_BINS - 1);
            }
        }
        Self {
            width,
            height,
            rgb,
            grad_mag,
            grad_bin,
        }
    }

    fn cell_stat(&self, stat: ChannelStat, (x0, x1): (usize, usize), (y0, y1): (usize, usize)) -> f64 {
        let count = ((x1 - x0) * (y1 - y0)) as f64;
        let pixels = || (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * self.width + x));
        let mean = |plane: &[f64]| pixels().map(|i| plane[i]).sum::<f64>() / count;
        let std = |plane: &[f64]| {
            let m = mean(plane);
            (pixels().map(|i| (plane[i] - m).powi(2)).sum::<f64>() / count).sqrt()
        };
        match stat {
            ChannelStat::MeanR => mean(&self.rgb[0]),
            ChannelStat::MeanG => mean(&self.rgb[1]),
            ChannelStat::MeanB => mean(&self.rgb[2]),
            ChannelStat::StdR => std(&self.rgb[0]),
            ChannelStat::StdG => std(&self.rgb[1]),
            ChannelStat::StdB => std(&self.rgb[2]),
            ChannelStat::GradientMagnitude => mean(&self.grad_mag),
            ChannelStat::OrientationEntropy => {
                let mut hist = [0.0; ORIENTATION_BINS];
                for i in pixels() {
                    hist[self.grad_bin[i]] += self.grad_mag[i];
                }
                let total: f64 = hist.iter().sum();
                if total <= 0.0 {
                    return 0.0;
                }
                let h: f64 = hist
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| {
                        let p = v / total;
                        -p * p.ln()
                    })
                    .sum();
                h / (ORIENTATION_BINS as f64).ln()
            }
        }
    }
}

/// Per-cell statistics before channel standardisation.
pub fn extract_raw_features(image: &RgbImage, config: &BackboneConfig) -> Result<FeatureTensor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(invalid("image has zero dimension"));
    }
    if config.grid_w == 0 || config.grid_h == 0 || config.stats.is_empty() {
        return Err(invalid("backbone grid and channel list must be non-empty"));
    }
    let planes = Planes::new(image);
    let (gw, gh) = (config.grid_w, config.grid_h);
    let mut data = Vec::with_capacity(config.channels() * gw * gh);
    for &stat in &config.stats {
        for cy in 0..gh {
            let ys = cell_span(cy, gh, planes.height);
            for cx in 0..gw {
                let xs = cell_span(cx, gw, planes.width);
                data.push(planes.cell_stat(stat, xs, ys));
            }
        }
    }
    Ok(FeatureTensor::from_parts(config.channels(), gw, gh, data))
}

/// Standardises each channel to zero mean and unit variance over the tensor.
pub fn standardize_channels(t: &mut FeatureTensor) {
    let plane = t.width() * t.height();
    let n = plane as f64;
    for c in 0..t.channels() {
        let values = &mut t.data_mut()[c * plane..(c + 1) * plane];
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + STD_EPS;
        for v in values.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
}

pub fn extract_features(image: &RgbImage, config: &BackboneConfig) -> Result<FeatureTensor> {
    let mut t = extract_raw_features(image, config)?;
    standardize_channels(&mut t);
    Ok(t)
}

/// Decodes PNG/JPEG bytes into an RGB raster.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]))
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let img = RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]));
        let raw = extract_raw_features(&img, &BackboneConfig::default()).unwrap();
        assert!(raw.channel(6).iter().all(|&v| v == 0.0));
        assert!(raw.channel(7).iter().all(|&v| v == 0.0));
        let t = extract_features(&img, &BackboneConfig::default()).unwrap();
        assert!(t.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deterministic_over_png_bytes() {
        let img = gradient_image(40, 30);
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let a = extract_features(&decode_image(&bytes).unwrap(), &BackboneConfig::default()).unwrap();
        let b = extract_features(&decode_image(&bytes).unwrap(), &BackboneConfig::default()).unwrap();
        let bits = |t: &FeatureTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn cells_aggregate_4x4_blocks() {
        // Each 4x4 block gets a colour derived from its cell index; the raw
        // mean channels must reproduce it exactly and the std channels must be 0.
        let img = RgbImage::from_fn(64, 64, |x, y| {
            let (cx, cy) = (x / 4, y / 4);
            Rgb([(cx * 16) as u8, (cy * 16) as u8, ((cx * 3 + cy * 5) % 256) as u8])
        });
        let raw = extract_raw_features(&img, &BackboneConfig::default()).unwrap();
        assert_eq!(raw.shape(), (8, 16, 16));
        for cy in 0..16 {
            for cx in 0..16 {
                let close = |c: usize, v: f64| assert!((raw.get(c, cy, cx) - v).abs() < 1e-12);
                close(0, (cx * 16) as f64 / 255.0);
                close(1, (cy * 16) as f64 / 255.0);
                close(2, ((cx * 3 + cy * 5) % 256) as f64 / 255.0);
                for c in 3..6 {
                    close(c, 0.0);
                }
            }
        }
    }

    #[test]
    fn cell_span_boundaries() {
        assert_eq!(cell_span(0, 16, 64), (0, 4));
        assert_eq!(cell_span(15, 16, 64), (60, 64));
        // image smaller than grid still yields one pixel per cell
        assert_eq!(cell_span(3, 16, 8), (1, 2));
        assert_eq!(cell_span(15, 16, 8), (7, 8));
    }

    #[test]
    fn channels_standardized() {
        let t = extract_features(&gradient_image(48, 48), &BackboneConfig::default()).unwrap();
        for c in 0..3 {
            let ch = t.channel(c);
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let img = RgbImage::new(0, 10);
        assert!(extract_features(&img, &BackboneConfig::default()).is_err());
    }
}
