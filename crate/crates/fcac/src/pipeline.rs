//! The experiment commands: prepare, train, eval and ablate.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fcac_core::digest::Hasher;
use fcac_core::evaluation::{run_finetune, run_incremental};
use fcac_core::features::FeatureStore;
use fcac_core::protocol::{build_schedule, ClassId, SessionManifest, SessionSchedule};
use fcac_core::training::{pipeline_fingerprint, train_with, FinetuneConfig, IterationRecord, Trainer};
use fcac_core::model::BundleDigest;
use fcac_core::{seeded_rng, ModelBundle};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_json, unix_ms, write_json, write_ndjson, Aggregate, Checkpoint, Layout, ModuleDigests, ReportFile,
    Timing, CHECKPOINT_FORMAT,
};
use crate::audio::read_wav;
use crate::cache::FeatureCache;
use crate::config::{DatasetConfig, ExperimentConfig, Method};
use crate::fbank::FbankExtractor;
use crate::manifest::{group_sessions, load_manifest};

/// Sessions and features ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub base: SessionManifest,
    pub incremental: Vec<SessionManifest>,
    pub features: FeatureStore,
    /// Covers every sample identity and the feature fingerprint.
    pub fingerprint: String,
    pub extracted: usize,
    pub cached: usize,
}

impl Dataset {
    pub fn base_labels(&self) -> Vec<ClassId> {
        fcac_core::protocol::LabelSpace::from_records(&self.base.train).into()
    }

    pub fn schedule(&self, cfg: &ExperimentConfig, seed: u64) -> Result<SessionSchedule> {
        let schedule = build_schedule(
            self.base.clone(),
            self.incremental.clone(),
            cfg.protocol.n_way,
            cfg.protocol.k_shot,
            &mut seeded_rng(seed),
        )?;
        Ok(schedule)
    }
}

fn dataset_fingerprint(base: &SessionManifest, incremental: &[SessionManifest], features: &FeatureStore) -> String {
    let mut h = Hasher::new();
    h.u64(features.fingerprint().unwrap_or(0));
    for s in std::iter::once(base).chain(incremental) {
        h.u64(s.train.len() as u64).u64(s.test.len() as u64);
        for r in s.train.iter().chain(&s.test) {
            h.str(&r.sample.0).str(&r.label.0);
        }
    }
    h.finish().hex()
}

/// Generates or extracts every feature map the experiment uses.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (base, incremental, features, extracted, cached) = match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => {
            let data = spec.generate()?;
            (data.base, data.incremental, data.features, 0, 0)
        }
        DatasetConfig::Manifest { path } => {
            let entries = load_manifest(path)?;
            let (base, incremental) = group_sessions(&entries)?;
            let cache = FeatureCache::from_env(cfg.output_dir.join("cache"));
            let extractor = FbankExtractor::new(cfg.features.clone())?;
            let fp = cfg.features.fingerprint();
            let mut store = FeatureStore::new();
            let (mut extracted, mut cached) = (0, 0);
            for e in &entries {
                let hit = cache
                    .load(&e.sample, fp)
                    .with_context(|| format!("reading cache for {}", e.path.display()))?;
                let map = match hit {
                    Some(map) => {
                        cached += 1;
                        map
                    }
                    None => {
                        if !e.path.exists() {
                            bail!("missing audio file: {}", e.path.display());
                        }
                        let wave = read_wav(&e.path)?;
                        let map = extractor
                            .extract(&wave)
                            .with_context(|| format!("extracting {}", e.path.display()))?;
                        cache
                            .store(&e.sample, &map)
                            .with_context(|| format!("caching {}", e.path.display()))?;
                        extracted += 1;
                        map
                    }
                };
                store.insert(e.sample.clone(), map)?;
            }
            (base, incremental, store, extracted, cached)
        }
    };
    let fingerprint = dataset_fingerprint(&base, &incremental, &features);
    Ok(Dataset {
        base,
        incremental,
        features,
        fingerprint,
        extracted,
        cached,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub config: ExperimentConfig,
    pub data_fingerprint: String,
    /// Class labels of each session.
    pub sessions: Vec<Vec<ClassId>>,
    pub samples: usize,
    pub extracted: usize,
    pub cached: usize,
}

/// Builds the dataset, validates one schedule per evaluation seed and writes
/// the schedules plus a dataset summary.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, DatasetSummary)> {
    let data = load_dataset(cfg)?;
    let layout = Layout::new(&cfg.output_dir, &cfg.experiment_id);
    let mut schedules = Vec::new();
    for &seed in &cfg.evaluation.seeds {
        schedules.push((seed, data.schedule(cfg, seed)?));
    }
    for (seed, schedule) in &schedules {
        write_json(&layout.schedule(*seed), schedule)?;
    }
    let summary = DatasetSummary {
        config: cfg.clone(),
        data_fingerprint: data.fingerprint.clone(),
        sessions: schedules[0].1.sessions.iter().map(|s| s.label_space.labels().to_vec()).collect(),
        samples: data.features.len(),
        extracted: data.extracted,
        cached: data.cached,
    };
    write_json(&layout.dataset(), &summary)?;
    Ok((data, summary))
}

fn pipeline_id(cfg: &ExperimentConfig) -> String {
    let mut h = Hasher::new();
    h.str(cfg.method.name())
        .bytes(&pipeline_fingerprint(&cfg.model, &cfg.rets, &cfg.training_flags()).0);
    h.finish().hex()
}

/// Trains the base model, resuming from a compatible checkpoint when one
/// exists. Returns the final checkpoint.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<Checkpoint> {
    let layout = Layout::new(&cfg.output_dir, &cfg.experiment_id);
    let pipeline = pipeline_id(cfg);
    let flags = cfg.training_flags();
    let base_train = data.base.train.clone();
    cfg.rets.validate(data.base_labels().len())?;

    let mut log: Vec<IterationRecord> = Vec::new();
    let mut trainer = match resume_point(&layout, &pipeline, &data.fingerprint)? {
        Some((ckpt, old_log)) => {
            log = old_log;
            ckpt.trainer
        }
        None => {
            let bundle = ModelBundle::new(cfg.model.clone(), cfg.input_shape(), &data.base_labels(), cfg.rets.seed)?;
            Trainer::new(bundle, &cfg.rets)
        }
    };

    let checkpoint = |trainer: &Trainer, last: Option<&IterationRecord>| Checkpoint {
        format: CHECKPOINT_FORMAT,
        config: cfg.clone(),
        pipeline: pipeline.clone(),
        data_fingerprint: data.fingerprint.clone(),
        trainer: trainer.clone(),
        last_record: last.cloned(),
    };
    let every = cfg.train.checkpoint_every;
    let mut save_error = None;
    train_with(&mut trainer, &base_train, &data.features, &cfg.rets, flags, |record, t| {
        log.push(record.clone());
        if every > 0 && t.iteration % every == 0 && !t.is_done(&cfg.rets) && save_error.is_none() {
            let result = write_ndjson(&layout.train_log(), &log)
                .and_then(|_| write_json(&layout.checkpoint(), &checkpoint(t, Some(record))));
            save_error = result.err();
        }
    })?;
    if let Some(e) = save_error {
        return Err(e);
    }
    let last = checkpoint(&trainer, log.last());
    write_ndjson(&layout.train_log(), &log)?;
    write_json(&layout.checkpoint(), &last)?;
    Ok(last)
}

fn resume_point(layout: &Layout, pipeline: &str, data_fp: &str) -> Result<Option<(Checkpoint, Vec<IterationRecord>)>> {
    if !layout.checkpoint().exists() {
        return Ok(None);
    }
    let ckpt: Checkpoint = read_json(&layout.checkpoint())?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.pipeline != pipeline || ckpt.data_fingerprint != data_fp {
        return Ok(None);
    }
    let text = std::fs::read_to_string(layout.train_log()).unwrap_or_default();
    let log: Vec<IterationRecord> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .context("parsing training log")?;
    if log.len() != ckpt.trainer.iteration {
        return Ok(None);
    }
    Ok(Some((ckpt, log)))
}

/// Loads the experiment checkpoint and checks it matches the config and data.
pub fn load_checkpoint(cfg: &ExperimentConfig, data: &Dataset) -> Result<Checkpoint> {
    let layout = Layout::new(&cfg.output_dir, &cfg.experiment_id);
    let path = layout.checkpoint();
    let ckpt: Checkpoint = read_json(&path).context("no checkpoint; run `fcac train` first")?;
    if ckpt.format != CHECKPOINT_FORMAT {
        bail!("{}: unsupported checkpoint format {}", path.display(), ckpt.format);
    }
    if ckpt.pipeline != pipeline_id(cfg) {
        bail!("{}: checkpoint was trained with a different model or training config", path.display());
    }
    if ckpt.data_fingerprint != data.fingerprint {
        bail!("{}: checkpoint was trained on different data", path.display());
    }
    if !ckpt.trainer.is_done(&cfg.rets) {
        bail!(
            "{}: training stopped at iteration {} of {}",
            path.display(),
            ckpt.trainer.iteration,
            cfg.rets.max_iterations
        );
    }
    Ok(ckpt)
}

fn module_digests(d: BundleDigest) -> ModuleDigests {
    ModuleDigests {
        backbone: d.backbone.hex(),
        drpm: d.drpm.hex(),
        relation: d.relation.hex(),
    }
}

/// Evaluates one trial seed.
pub fn eval_seed(cfg: &ExperimentConfig, data: &Dataset, ckpt: &Checkpoint, seed: u64) -> Result<ReportFile> {
    let schedule = data.schedule(cfg, seed)?;
    let bundle = &ckpt.trainer.bundle;
    let (report, counts, before, after) = match cfg.method {
        Method::Proposed => {
            let run = run_incremental(bundle, &schedule, &data.features, &cfg.eval_options())?;
            (
                run.report,
                run.prototype_counts,
                module_digests(run.digests_before),
                Some(module_digests(run.digests_after)),
            )
        }
        Method::Finetune => {
            let ft = FinetuneConfig {
                seed,
                ..cfg.finetune.clone()
            };
            let report = run_finetune(bundle, &schedule, &data.features, &ft)?;
            let counts = schedule
                .sessions
                .iter()
                .scan(0, |n, s| {
                    *n += s.label_space.len();
                    Some(*n)
                })
                .collect();
            (report, counts, module_digests(bundle.digests()), None)
        }
    };
    Ok(ReportFile {
        experiment_id: cfg.experiment_id.clone(),
        method: cfg.method.name().into(),
        seed,
        config: cfg.clone(),
        checkpoint_digest: bundle.digest().hex(),
        report,
        prototype_counts: counts,
        digests_before: before,
        digests_after: after,
    })
}

/// Runs every trial seed, then writes all reports and the aggregate. Nothing
/// is written unless every seed succeeds.
pub fn eval(cfg: &ExperimentConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<Aggregate> {
    let layout = Layout::new(&cfg.output_dir, &cfg.experiment_id);
    let seeds = &cfg.evaluation.seeds;
    let run = |seed: u64| -> Result<(ReportFile, Timing)> {
        let started = unix_ms();
        let report = eval_seed(cfg, data, ckpt, seed).with_context(|| format!("evaluating seed {seed}"))?;
        Ok((
            report,
            Timing {
                started_unix_ms: started,
                finished_unix_ms: unix_ms(),
            },
        ))
    };
    let results: Vec<Result<(ReportFile, Timing)>> = if cfg.evaluation.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("evaluation thread panicked"))))
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| run(seed)).collect()
    };
    let results: Vec<(ReportFile, Timing)> = results.into_iter().collect::<Result<_>>()?;
    let reports: Vec<ReportFile> = results.iter().map(|(r, _)| r.clone()).collect();
    let aggregate = Aggregate::from_reports(&reports).context("no evaluation seeds")?;
    for (report, timing) in &results {
        write_json(&layout.report(report.seed), report)?;
        write_json(&layout.timing(report.seed), timing)?;
    }
    write_json(&layout.aggregate(), &aggregate)?;
    Ok(aggregate)
}

/// Configurations compared by [`ablate`].
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    let variant = |name: &'static str, method: Method, no_drpm: bool, no_rets: bool| {
        let mut c = cfg.clone();
        c.experiment_id = format!("{}-{name}", cfg.experiment_id);
        c.method = method;
        c.ablation.no_drpm = no_drpm;
        c.ablation.no_rets = no_rets;
        c.evaluation.options.no_drpm = false;
        (name, c)
    };
    vec![
        variant("proposed", Method::Proposed, false, false),
        variant("no_drpm", Method::Proposed, true, false),
        variant("no_rets", Method::Proposed, false, true),
        variant("finetune", Method::Finetune, false, false),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_accuracy: Vec<f64>,
    pub mean_aa: f64,
    pub mean_pd: f64,
}

/// Trains and evaluates every variant, then writes `ablation.json`.
pub fn ablate(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, c) in ablation_variants(cfg) {
        let ckpt = train(&c, data).with_context(|| format!("training variant {name}"))?;
        let agg = eval(&c, data, &ckpt).with_context(|| format!("evaluating variant {name}"))?;
        rows.push(AblationRow {
            variant: name.into(),
            mean_accuracy: agg.mean_accuracy,
            mean_aa: agg.mean_aa,
            mean_pd: agg.mean_pd,
        });
    }
    write_json(&cfg.output_dir.join(&cfg.experiment_id).join("ablation.json"), &rows)?;
    Ok(rows)
}

/// Reads the accuracy curve from an aggregate (`mean_accuracy`), a report
/// (`report.sessions[].accuracy`) or a bare `accuracies` list.
pub fn read_curve(path: &Path) -> Result<(String, Vec<f64>)> {
    let v: serde_json::Value = read_json(path)?;
    let name = match (v["experiment_id"].as_str(), v["method"].as_str(), v["seed"].as_u64()) {
        (Some(id), Some(m), Some(seed)) => format!("{id} ({m}, seed {seed})"),
        (Some(id), Some(m), None) => format!("{id} ({m})"),
        (Some(id), None, _) => id.to_string(),
        _ => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let acc: Option<Vec<f64>> = if let Some(a) = v.get("mean_accuracy") {
        serde_json::from_value(a.clone()).ok()
    } else if let Some(sessions) = v["report"]["sessions"].as_array() {
        sessions.iter().map(|s| s["accuracy"].as_f64()).collect()
    } else if let Some(a) = v.get("accuracies") {
        serde_json::from_value(a.clone()).ok()
    } else {
        None
    };
    match acc {
        Some(a) if !a.is_empty() => Ok((name, a)),
        _ => bail!("{}: no accuracy curve found", path.display()),
    }
}
