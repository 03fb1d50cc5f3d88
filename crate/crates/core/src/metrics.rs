//! Append-only run records, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss components of a record. Absent components were not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub cls: Option<f64>,
    pub pcl: Option<f64>,
    pub pcl_domain: Option<f64>,
    pub pcl_task: Option<f64>,
    pub cci: Option<f64>,
    /// `λ_PCL · pcl`, zero when the term is disabled.
    pub weighted_pcl: f64,
    /// `λ_CCI · cci`, zero when the term is disabled.
    pub weighted_cci: f64,
    pub total: Option<f64>,
}

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// `train`, `val`, `test`, or a report name such as `distance`.
    pub split: String,
    pub loss: LossRecord,
    pub accuracy: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Report-specific values (distances, purities, ...).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl MetricRecord {
    pub fn new(step: u64, split: &str, seed: u64, config_hash: &str) -> Self {
        MetricRecord {
            step,
            split: split.to_string(),
            loss: LossRecord::default(),
            accuracy: None,
            seed,
            config_hash: config_hash.to_string(),
            method: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

/// Collects records in memory and mirrors them to an optional file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            records: Vec::new(),
            file: Some((path.to_path_buf(), file)),
        })
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some((path, file)) = &mut self.file {
            writeln!(file, "{}", record.to_line()).map_err(|e| Error::io(path.clone(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricRecord> {
        self.records
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
