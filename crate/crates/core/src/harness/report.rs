//! Run reports (JSON) and the long-form results CSV.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::stats::{ci95, mean};
use crate::adapters::ParamCount;
use crate::error::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the accuracies' little-endian bytes.
pub fn accuracy_digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Summary {
            mean: mean(values),
            ci95: ci95(values),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub episode: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub iterations: usize,
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub seen: bool,
    /// Episodes that completed.
    pub n_episodes: usize,
    pub mean: f64,
    pub ci95: f64,
    pub digest: String,
    /// Per-episode query accuracy in episode order (failures omitted).
    pub accuracies: Vec<f64>,
    pub checkpoints: Vec<CheckpointSummary>,
    pub failures: Vec<EpisodeFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub adapters: usize,
    pub pa: usize,
    pub trainable: usize,
    pub backbone_conv: usize,
    pub fraction: f64,
}

impl From<ParamCount> for ParamSummary {
    fn from(p: ParamCount) -> Self {
        ParamSummary {
            adapters: p.adapters,
            pa: p.pa,
            trainable: p.total(),
            backbone_conv: p.backbone_conv,
            fraction: p.fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub method: String,
    pub config: RunConfig,
    pub params: ParamSummary,
    pub datasets: Vec<DatasetReport>,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Report(format!(
                "report format version {} is not supported (expected {REPORT_FORMAT_VERSION})",
                r.format_version
            )));
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// One CSV row per dataset.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        self.datasets
            .iter()
            .map(|d| CsvRow {
                method: self.method.clone(),
                dataset: d.name.clone(),
                seen_flag: d.seen,
                protocol: self.config.protocol.code().to_string(),
                n_episodes: d.n_episodes,
                mean_acc: d.mean,
                ci95: d.ci95,
                params_fraction: self.params.fraction,
                seed: self.config.seed,
            })
            .collect()
    }
}

/// One line of the long-form results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub dataset: String,
    pub seen_flag: bool,
    pub protocol: String,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub params_fraction: f64,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "method",
    "dataset",
    "seen_flag",
    "protocol",
    "n_episodes",
    "mean_acc",
    "ci95",
    "params_fraction",
    "seed",
];

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_csv(path: impl AsRef<Path>, rows: &[CsvRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Report(format!("unexpected CSV header {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
