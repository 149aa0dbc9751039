use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{auc_op, InterestSequence};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AucOpReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_4: Option<f64>,
}

impl AucOpReport {
    /// Computes all three tolerances; an undefined metric leaves its field empty.
    pub fn from_sequence(seq: &InterestSequence) -> Result<Self> {
        let at = |d: f64| match auc_op(seq, d) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            delta_1: at(1.0)?,
            delta_2: at(2.0)?,
            delta_4: at(4.0)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Wall-clock duration of the whole run.
    pub wall_ms: u64,
    /// Simulated mission duration.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mission_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fine_tune_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionReport {
    pub schema_version: u32,
    pub mission_id: String,
    /// Class name -> COCO-style AP.
    #[serde(default)]
    pub per_class_ap: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap50: Option<f64>,
    #[serde(default)]
    pub auc_op: AucOpReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bandwidth_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_frames: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_sent: Option<u64>,
    #[serde(default)]
    pub timings: Timings,
}

impl MissionReport {
    pub fn new(mission_id: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            mission_id: mission_id.into(),
            per_class_ap: BTreeMap::new(),
            map: None,
            ap50: None,
            auc_op: AucOpReport::default(),
            bandwidth_ratio: None,
            n_frames: None,
            n_sent: None,
            timings: Timings::default(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported report schema version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn emit(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MissionReport {
        let mut r = MissionReport::new("m-1");
        r.per_class_ap.insert("cone".into(), 0.5);
        r.map = Some(0.5);
        r.auc_op = AucOpReport {
            delta_1: Some(0.25),
            delta_2: Some(0.5),
            delta_4: None,
        };
        r.bandwidth_ratio = Some(0.15);
        r.timings.wall_ms = 12;
        r
    }

    #[test]
    fn round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let r = sample();
        r.emit(&path).unwrap();
        assert_eq!(MissionReport::load(&path).unwrap(), r);
    }

    #[test]
    fn optional_fields_omitted_and_delta_keys_fixed() {
        let v: serde_json::Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["auc_op"]["delta_1"], 0.25);
        assert_eq!(v["auc_op"]["delta_2"], 0.5);
        assert!(v["auc_op"].get("delta_4").is_none());
        assert!(v.get("ap50").is_none());
        assert!(v["timings"].get("mission_ms").is_none());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = sample().emit(Path::new("/nonexistent-dir/x/report.json")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn wrong_schema_rejected() {
        let s = sample()
            .to_json()
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(MissionReport::from_json(&s).is_err());
    }
}
