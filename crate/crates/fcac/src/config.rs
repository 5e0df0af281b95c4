//! Experiment configuration: one TOML file plus `--set dotted.key=value`
//! overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fcac_core::backbone::BackboneKind;
use fcac_core::evaluation::EvalOptions;
use fcac_core::features::SyntheticFcacSpec;
use fcac_core::training::{AblationFlags, FinetuneConfig, RetsConfig};
use fcac_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::fbank::FbankConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Episodic training, then frozen modules with refined prototypes.
    #[default]
    Proposed,
    /// Plain training, then full retraining on every incremental session.
    Finetune,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticFcacSpec),
    /// A tab-separated manifest; see [`crate::manifest`].
    Manifest { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticFcacSpec {
            base_classes: 10,
            incremental_sessions: 3,
            n_way: 2,
            base_train_per_class: 20,
            novel_train_per_class: 10,
            test_per_class: 10,
            frames: 8,
            bins: 8,
            within_std: 0.1,
            between_std: 1.0,
            seed: 42,
        })
    }
}

/// Shape of every incremental session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub n_way: usize,
    pub k_shot: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { n_way: 2, k_shot: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// One trial per seed; the seed draws each session's K-shot support.
    pub seeds: Vec<u64>,
    /// Run trials on separate threads.
    pub parallel: bool,
    #[serde(flatten)]
    pub options: EvalOptions,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            parallel: false,
            options: EvalOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainLogConfig {
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    pub method: Method,
    pub dataset: DatasetConfig,
    pub features: FbankConfig,
    pub protocol: ProtocolConfig,
    pub model: ModelConfig,
    pub rets: RetsConfig,
    pub finetune: FinetuneConfig,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationFlags,
    pub train: TrainLogConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "synthetic".into(),
            output_dir: PathBuf::from("runs"),
            method: Method::Proposed,
            dataset: DatasetConfig::default(),
            features: FbankConfig::default(),
            protocol: ProtocolConfig::default(),
            model: ModelConfig {
                d: 32,
                backbone: BackboneKind::Cnn { channels: [8, 16, 32] },
                ..ModelConfig::default()
            },
            rets: RetsConfig {
                t: 3,
                n_way: 2,
                k_shot: 5,
                q_per_class: 3,
                lr: 0.02,
                max_iterations: 600,
                ..RetsConfig::default()
            },
            finetune: FinetuneConfig::default(),
            evaluation: EvaluationConfig::default(),
            ablation: AblationFlags::default(),
            train: TrainLogConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// `(frames, bins)` of every feature map the dataset produces.
    pub fn input_shape(&self) -> (usize, usize) {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => (s.frames, s.bins),
            DatasetConfig::Manifest { .. } => (self.features.frames(), self.features.n_mels),
        }
    }

    /// Training flags in effect for this config's method.
    pub fn training_flags(&self) -> AblationFlags {
        match self.method {
            Method::Proposed => self.ablation,
            Method::Finetune => AblationFlags {
                no_drpm: true,
                no_rets: true,
            },
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            no_drpm: self.evaluation.options.no_drpm || self.ablation.no_drpm,
            ..self.evaluation.options
        }
    }

    /// Checks cross-module consistency before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty() || self.experiment_id.contains(['/', '\\']) {
            bail!("experiment_id must be a non-empty single path component");
        }
        if self.evaluation.seeds.is_empty() {
            bail!("evaluation.seeds is empty");
        }
        let mut seen = self.evaluation.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.evaluation.seeds.len() {
            bail!("evaluation.seeds contains duplicates");
        }
        if self.protocol.n_way == 0 || self.protocol.k_shot == 0 {
            bail!("protocol.n_way and protocol.k_shot must be positive");
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                if s.n_way != self.protocol.n_way {
                    bail!(
                        "dataset.n_way ({}) differs from protocol.n_way ({})",
                        s.n_way,
                        self.protocol.n_way
                    );
                }
                if s.novel_train_per_class < self.protocol.k_shot {
                    bail!("dataset.novel_train_per_class is below protocol.k_shot");
                }
                if s.base_classes == 0 {
                    bail!("dataset.base_classes must be positive");
                }
                self.rets.validate(s.base_classes)?;
            }
            DatasetConfig::Manifest { .. } => {
                self.features.validate()?;
            }
        }
        self.model.validate(self.input_shape())?;
        if !(self.finetune.lr > 0.0) {
            bail!("finetune.lr must be positive");
        }
        Ok(())
    }
}

/// Parses one override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key.path=value` to a TOML table, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty component");
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {p:?} is not a table"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Defaults, then the file (if any), then overrides. A dataset table with a
/// different `kind` replaces the default dataset rather than merging into it.
pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = toml::Table::try_from(ExperimentConfig::default())?;
    let mut user = match file_text {
        Some(text) => toml::from_str::<toml::Table>(text).context("parsing config")?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let user_kind = user
        .get("dataset")
        .and_then(|d| d.get("kind"))
        .and_then(|k| k.as_str())
        .map(str::to_string);
    let default_kind = table["dataset"]["kind"].as_str().map(str::to_string);
    if user_kind.is_some() && user_kind != default_kind {
        table.remove("dataset");
    }
    merge_tables(&mut table, user);
    let cfg: ExperimentConfig = toml::Value::Table(table).try_into().context("invalid config")?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file and resolves relative paths against its directory.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut cfg = resolve(text.as_deref(), overrides)?;
    let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
    if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    if let DatasetConfig::Manifest { path } = &mut cfg.dataset {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    Ok(cfg)
}
