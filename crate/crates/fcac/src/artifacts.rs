//! Checkpoints, reports and their on-disk layout.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fcac_core::evaluation::RunReport;
use fcac_core::training::{IterationRecord, Trainer};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file and a failed run leaves the old one intact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

/// Directory layout of one experiment under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(output_dir: &Path, experiment_id: &str) -> Self {
        Self {
            root: output_dir.join(experiment_id),
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.ndjson")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(seed.to_string())
    }

    pub fn schedule(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("schedule.json")
    }

    pub fn report(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("report.json")
    }

    /// Wall-clock times live beside the report so the report itself stays
    /// reproducible.
    pub fn timing(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("timing.json")
    }

    pub fn aggregate(&self) -> PathBuf {
        self.root.join("aggregate.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: ExperimentConfig,
    /// Digest of the pipeline settings the model was trained with.
    pub pipeline: String,
    /// Fingerprint of the features the model was trained on.
    pub data_fingerprint: String,
    pub trainer: Trainer,
    pub last_record: Option<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleDigests {
    pub backbone: String,
    pub drpm: String,
    pub relation: String,
}

/// One evaluation run, reconstructible from its embedded config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub experiment_id: String,
    pub method: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub checkpoint_digest: String,
    pub report: RunReport,
    pub prototype_counts: Vec<usize>,
    /// Frozen-module digests before session 1.
    pub digests_before: ModuleDigests,
    /// Frozen-module digests after the final session; absent for methods
    /// that retrain the modules.
    pub digests_after: Option<ModuleDigests>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub aa: f64,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiment_id: String,
    pub method: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedSummary>,
    /// Mean accuracy of each session over seeds.
    pub mean_accuracy: Vec<f64>,
    pub mean_aa: f64,
    pub mean_pd: f64,
}

impl Aggregate {
    pub fn from_reports(reports: &[ReportFile]) -> Option<Self> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let sessions = first.report.sessions.len();
        let mean_accuracy = (0..sessions)
            .map(|l| reports.iter().map(|r| r.report.sessions[l].accuracy).sum::<f64>() / n)
            .collect();
        Some(Self {
            experiment_id: first.experiment_id.clone(),
            method: first.method.clone(),
            config: first.config.clone(),
            seeds: reports
                .iter()
                .map(|r| SeedSummary {
                    seed: r.seed,
                    aa: r.report.aa,
                    pd: r.report.pd,
                })
                .collect(),
            mean_accuracy,
            mean_aa: reports.iter().map(|r| r.report.aa).sum::<f64>() / n,
            mean_pd: reports.iter().map(|r| r.report.pd).sum::<f64>() / n,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}
