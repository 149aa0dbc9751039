use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense `C x H x W` scene representation, stored row-major as `(c, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(invalid(format!(
                "tensor dimensions must be positive, got {channels}x{width}x{height}"
            )));
        }
        if data.len() != channels * width * height {
            return Err(invalid(format!(
                "tensor data has {} entries, expected {}",
                data.len(),
                channels * width * height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tensor contains non-finite entries"));
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Result<Self> {
        Self::new(channels, width, height, vec![0.0; channels * width * height])
    }

    /// Builds a tensor without re-validating; callers guarantee the invariants.
    pub(crate) fn from_parts(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * width * height);
        Self {
            channels,
            width,
            height,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(C, W, H)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Circularly rolls every channel so that `out[y][x] = self[y - dy][x - dx]`.
    pub fn roll(&self, dy: usize, dx: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for y in 0..h {
                let sy = (y + h - dy % h) % h;
                for x in 0..w {
                    let sx = (x + w - dx % w) % w;
                    out[self.index(c, y, x)] = self.get(c, sy, sx);
                }
            }
        }
        Self::from_parts(self.channels, w, h, out)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::from_parts(
            self.channels,
            self.width,
            self.height,
            self.data.iter().map(|v| v * k).collect(),
        )
    }

    /// Writes the cache format: `C, W, H` as u32 LE followed by `C*W*H` f32 LE.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for dim in [self.channels, self.width, self.height] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 4];
        let mut dims = [0usize; 3];
        for dim in dims.iter_mut() {
            input.read_exact(&mut word)?;
            *dim = u32::from_le_bytes(word) as usize;
        }
        let [c, w, h] = dims;
        let len = c
            .checked_mul(w)
            .and_then(|n| n.checked_mul(h))
            .ok_or_else(|| invalid("tensor header overflows"))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            input.read_exact(&mut word)?;
            data.push(f32::from_le_bytes(word) as f64);
        }
        Self::new(c, w, h, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }
}

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// From top-left corner plus size, the layout used by annotation files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!(
                "box coordinates must be finite and non-negative: {self:?}"
            )));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(invalid(format!("box has no area: {self:?}")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Intersects with `[0, w] x [0, h]`; `None` when nothing with positive area remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        let b = Self {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}
