use serde::{Deserialize, Serialize};

use super::HeadParams;
use crate::error::{Error, Result};

/// Versioned copy of the final-layer weights pushed from the station to the robot.
///
/// On the wire the scalar fields travel as a JSON header and `blob` as
/// little-endian f32: class weights (background row last), then box weights,
/// then box biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    pub version: u64,
    pub n_classes: usize,
    pub n_base: usize,
    pub d: usize,
    pub alpha: f64,
    pub class_names: Vec<String>,
    pub blob: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaHeader {
    pub version: u64,
    pub n_classes: usize,
    pub n_base: usize,
    pub d: usize,
    pub alpha: f64,
    pub class_names: Vec<String>,
    pub blob_len: usize,
}

impl ParamDelta {
    pub fn expected_blob_len(n_classes: usize, d: usize) -> usize {
        (n_classes + 1) * d + n_classes * 4 * d + n_classes * 4
    }

    pub fn header(&self) -> DeltaHeader {
        DeltaHeader {
            version: self.version,
            n_classes: self.n_classes,
            n_base: self.n_base,
            d: self.d,
            alpha: self.alpha,
            class_names: self.class_names.clone(),
            blob_len: self.blob.len() * 4,
        }
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        self.blob.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_parts(header: DeltaHeader, blob: &[u8]) -> Result<Self> {
        if blob.len() != header.blob_len || !blob.len().is_multiple_of(4) {
            return Err(Error::Sync(format!(
                "delta blob has {} bytes, header declares {}",
                blob.len(),
                header.blob_len
            )));
        }
        let floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let delta = Self {
            version: header.version,
            n_classes: header.n_classes,
            n_base: header.n_base,
            d: header.d,
            alpha: header.alpha,
            class_names: header.class_names,
            blob: floats,
        };
        delta.validate()?;
        Ok(delta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.n_classes || self.n_base > self.n_classes {
            return Err(Error::Sync(format!(
                "delta lists {} class names for {} classes ({} base)",
                self.class_names.len(),
                self.n_classes,
                self.n_base
            )));
        }
        let expected = Self::expected_blob_len(self.n_classes, self.d);
        if self.blob.len() != expected {
            return Err(Error::Sync(format!(
                "delta blob holds {} floats, expected {expected}",
                self.blob.len()
            )));
        }
        if self.blob.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sync("delta blob contains non-finite values".into()));
        }
        Ok(())
    }
}

impl HeadParams {
    /// Rebuilds a head from a full delta.
    pub fn from_delta(delta: &ParamDelta) -> Result<Self> {
        let mut p = Self {
            dim: delta.d,
            alpha: delta.alpha,
            version: 0,
            n_base: 0,
            class_names: Vec::new(),
            class_weights: Vec::new(),
            box_weights: Vec::new(),
            box_bias: Vec::new(),
        };
        if !p.apply_delta(delta)? {
            return Err(Error::Sync("delta version must be at least 1".into()));
        }
        Ok(p)
    }

    pub fn snapshot_delta(&self) -> ParamDelta {
        ParamDelta {
            version: self.version,
            n_classes: self.n_classes(),
            n_base: self.n_base,
            d: self.dim,
            alpha: self.alpha,
            class_names: self.class_names.clone(),
            blob: self
                .trainables()
                .iter()
                .flat_map(|b| b.iter().map(|&v| v as f32))
                .collect(),
        }
    }

    /// Replaces the local final layer with the delta's contents when the delta
    /// is newer. Returns whether anything changed; stale deltas are ignored.
    pub fn apply_delta(&mut self, delta: &ParamDelta) -> Result<bool> {
        if delta.version <= self.version {
            return Ok(false);
        }
        delta.validate()?;
        if delta.d != self.dim {
            return Err(Error::Sync(format!(
                "delta feature dimension {} does not match local {}",
                delta.d, self.dim
            )));
        }
        let n = delta.n_classes;
        let d = delta.d;
        let cw = (n + 1) * d;
        let bw = n * 4 * d;
        let widen = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        self.class_weights = widen(&delta.blob[..cw]);
        self.box_weights = widen(&delta.blob[cw..cw + bw]);
        self.box_bias = widen(&delta.blob[cw + bw..]);
        self.class_names = delta.class_names.clone();
        self.n_base = delta.n_base;
        self.alpha = delta.alpha;
        self.version = delta.version;
        Ok(true)
    }
}
