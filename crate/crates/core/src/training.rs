//! Base-session training with random episodic training (RETS), the plain
//! cross-entropy ablation, and the finetune baseline.
//!
//! One RETS iteration samples a query set covering every base class and `t`
//! pseudo-incremental episodes. In each episode the episode classes play the
//! new classes: their prototypes are support means, the remaining rows of
//! `P₀` are the previous prototypes, the projection module refines the merged
//! matrix, and the relation module scores every query against it. Episode
//! losses are accumulated and a single SGD step updates the backbone, the
//! projection module, the relation module and `P₀` together.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::digest::{Hasher, ParamDigest};
use crate::error::ModelError;
use crate::features::{FeatureError, FeatureStore};
use crate::layers::{NormMode, StatLog};
use crate::model::{BundleVars, ModelBundle, ModelConfig};
use crate::optim::{cosine_lr, Sgd};
use crate::protocol::{
    sample_episode, sample_query_set, ClassId, Episode, LabelSpace, Labeled, QuerySet, SamplingError,
};
use crate::prototype::{init_base_prototypes, merge, PrototypeError};
use crate::backbone::BackboneKind;
use crate::tensor::Tensor;
use crate::{seeded_rng, SeededRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot train a frozen model")]
    Frozen,
    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("gradient became non-finite at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

/// How episode losses combine within one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetsConfig {
    /// Episodes per iteration.
    pub t: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query samples drawn from every base class per iteration.
    pub q_per_class: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub reduction: Reduction,
}

impl Default for RetsConfig {
    fn default() -> Self {
        Self {
            t: 3,
            n_way: 5,
            k_shot: 5,
            q_per_class: 5,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iterations: 1000,
            seed: 0,
            reduction: Reduction::Sum,
        }
    }
}

impl RetsConfig {
    pub fn validate(&self, n_base: usize) -> Result<(), TrainingError> {
        let fail = |m: String| Err(TrainingError::InvalidConfig(m));
        if self.t == 0 || self.n_way == 0 || self.k_shot == 0 || self.q_per_class == 0 {
            return fail("t, n_way, k_shot and q_per_class must be positive".into());
        }
        if self.n_way >= n_base {
            return fail(format!(
                "episodes need n_way < number of base classes ({} >= {n_base})",
                self.n_way
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    fn hash_into(&self, h: &mut Hasher) {
        h.str("rets")
            .u64(self.t as u64)
            .u64(self.n_way as u64)
            .u64(self.k_shot as u64)
            .u64(self.q_per_class as u64)
            .f64(self.lr)
            .f64(self.momentum)
            .f64(self.weight_decay)
            .u64(self.max_iterations as u64)
            .u64(self.seed)
            .u64(matches!(self.reduction, Reduction::Mean) as u64);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Use the merged prototypes as they are, without projection.
    pub no_drpm: bool,
    /// Train the base session with plain minibatch cross-entropy over `P₀`.
    pub no_rets: bool,
}

impl AblationFlags {
    fn hash_into(&self, h: &mut Hasher) {
        // the all-off case hashes to nothing so it matches the default pipeline
        if self.no_drpm {
            h.str("no_drpm");
        }
        if self.no_rets {
            h.str("no_rets");
        }
    }
}

/// Identifies a training pipeline: model layout, RETS settings and ablations.
pub fn pipeline_fingerprint(model: &ModelConfig, rets: &RetsConfig, flags: &AblationFlags) -> ParamDigest {
    let mut h = Hasher::new();
    h.str("model").u64(model.d as u64);
    match &model.backbone {
        BackboneKind::Identity => {
            h.str("identity");
        }
        BackboneKind::Cnn { channels } => {
            h.str("cnn");
            for &c in channels {
                h.u64(c as u64);
            }
        }
    }
    h.u64(model.rm_hidden[0] as u64)
        .u64(model.rm_hidden[1] as u64)
        .f64(model.dropout)
        .u64(model.d_latent.map_or(0, |v| v as u64 + 1))
        .u64(model.row_softmax as u64);
    rets.hash_into(&mut h);
    flags.hash_into(&mut h);
    h.finish()
}

/// The samples drawn for one iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IterationBatch {
    pub query: QuerySet,
    /// Empty when training without episodes.
    pub episodes: Vec<Episode>,
}

/// Normalization statistics gathered during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardStats {
    backbone: StatLog,
    drpm: Vec<StatLog>,
    relation: Vec<StatLog>,
}

#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    /// In [`ModelBundle::params_mut`] order; `None` where no update applies.
    pub grads: Vec<Option<Tensor>>,
    pub stats: ForwardStats,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
    /// Episodes drawn by the sampler in this iteration.
    pub episodes: usize,
}

/// The generator for iteration `iteration` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, iteration: usize) -> SeededRng {
    seeded_rng(seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Draws the query set and, unless `no_rets`, `t` episodes.
pub fn sample_iteration<R: Rng + ?Sized>(
    base_train: &[Labeled],
    config: &RetsConfig,
    flags: AblationFlags,
    rng: &mut R,
) -> Result<IterationBatch, SamplingError> {
    let query = sample_query_set(base_train, config.q_per_class, rng)?;
    let episodes = if flags.no_rets {
        Vec::new()
    } else {
        (0..config.t)
            .map(|_| sample_episode(base_train, config.n_way, config.k_shot, rng))
            .collect::<Result<_, _>>()?
    };
    Ok(IterationBatch { query, episodes })
}

fn targets(samples: &[Labeled], registry: &[ClassId]) -> Result<Vec<usize>, PrototypeError> {
    samples
        .iter()
        .map(|s| {
            registry
                .iter()
                .position(|l| *l == s.label)
                .ok_or_else(|| PrototypeError::UnknownLabel(s.label.clone()))
        })
        .collect()
}

/// `[n × n·k]` matrix averaging consecutive groups of `k` rows.
fn group_mean_matrix(n: usize, k: usize) -> Tensor {
    let mut a = vec![0.0; n * n * k];
    for c in 0..n {
        for j in 0..k {
            a[c * n * k + c * k + j] = 1.0 / k as f64;
        }
    }
    Tensor::from_vec(&[n, n * k], a)
}

/// Embeds `samples` on the tape as one batch.
fn embed_on_tape(
    bundle: &ModelBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    features: &FeatureStore,
    samples: &[&Labeled],
    stats: &mut StatLog,
) -> Result<Var, TrainingError> {
    let maps = samples
        .iter()
        .map(|s| features.get(&s.sample))
        .collect::<Result<Vec<_>, _>>()?;
    let input = tape.constant(bundle.backbone.input_tensor(&maps)?);
    Ok(bundle.backbone.forward(tape, &vars.backbone, input, stats))
}

/// Loss and gradients of one iteration batch.
///
/// With episodes this is the RETS objective; without, queries are scored
/// against the full `P₀`. Dropout draws come from `dropout_seed`, so a fixed
/// seed makes the loss a deterministic function of the parameters.
pub fn loss_and_grads(
    bundle: &ModelBundle,
    batch: &IterationBatch,
    features: &FeatureStore,
    reduction: Reduction,
    flags: AblationFlags,
    dropout_seed: Option<u64>,
) -> Result<LossAndGrads, TrainingError> {
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape);
    let mut stats = ForwardStats::default();
    let mut dropout = dropout_seed.map(seeded_rng);

    let mut samples: Vec<&Labeled> = batch.query.samples.iter().collect();
    for ep in &batch.episodes {
        samples.extend(ep.support.iter());
    }
    let emb = embed_on_tape(bundle, &mut tape, &vars, features, &samples, &mut stats.backbone)?;
    let nq = batch.query.samples.len();
    let q_emb = tape.gather_rows(emb, (0..nq).collect());

    let mut losses = Vec::with_capacity(batch.episodes.len().max(1));
    if batch.episodes.is_empty() {
        let mut rel = StatLog::new();
        let logits = bundle
            .relation
            .forward(&mut tape, &vars.relation, q_emb, vars.prototypes, dropout.as_mut(), &mut rel);
        let t = targets(&batch.query.samples, bundle.prototypes.registry())?;
        losses.push(tape.softmax_cross_entropy(logits, t));
        stats.relation.push(rel);
    }
    let mut offset = nq;
    for ep in &batch.episodes {
        let (n, k) = (ep.n_way(), ep.k_shot());
        let support = tape.gather_rows(emb, (offset..offset + n * k).collect());
        offset += n * k;
        let avg = tape.constant(group_mean_matrix(n, k));
        let p_new = tape.matmul(avg, support);

        let kept = bundle.prototypes.kept_rows(ep.label_set.labels())?;
        let mut registry: Vec<ClassId> = kept
            .iter()
            .map(|&r| bundle.prototypes.registry()[r].clone())
            .collect();
        registry.extend(ep.label_set.labels().iter().cloned());
        let p_pre = tape.gather_rows(vars.prototypes, kept);
        let p_init = tape.concat_rows(p_pre, p_new);

        let p_re = if flags.no_drpm {
            p_init
        } else {
            let mut log = StatLog::new();
            let (_, refined) = bundle.drpm.forward(&mut tape, &vars.drpm, p_init, p_pre, &mut log);
            stats.drpm.push(log);
            refined
        };
        let mut rel = StatLog::new();
        let logits = bundle
            .relation
            .forward(&mut tape, &vars.relation, q_emb, p_re, dropout.as_mut(), &mut rel);
        stats.relation.push(rel);
        let t = targets(&batch.query.samples, &registry)?;
        losses.push(tape.softmax_cross_entropy(logits, t));
    }

    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l);
    }
    if reduction == Reduction::Mean && losses.len() > 1 {
        total = tape.scale(total, 1.0 / losses.len() as f64);
    }
    let loss = tape.value(total).data()[0];
    let grads = tape.backward(total);
    let mut grads = bundle.gradients(&vars, &grads);
    if flags.no_drpm {
        let start = vars.backbone.len();
        for g in &mut grads[start..start + vars.drpm.len()] {
            *g = None;
        }
    }
    Ok(LossAndGrads { loss, grads, stats })
}

fn apply_stats(bundle: &mut ModelBundle, stats: &ForwardStats) {
    bundle.backbone.absorb(&stats.backbone);
    for log in &stats.drpm {
        bundle.drpm.absorb(log);
    }
    for log in &stats.relation {
        bundle.relation.absorb(log);
    }
}

fn grads_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(Tensor::is_finite)
}

/// Optimizer state plus the model, resumable at any iteration boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub optimizer: Sgd,
    /// Iterations completed so far.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: &RetsConfig) -> Self {
        Self {
            bundle,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            iteration: 0,
        }
    }

    /// Runs one iteration: sample, forward, backward, one SGD step.
    pub fn step(
        &mut self,
        base_train: &[Labeled],
        features: &FeatureStore,
        config: &RetsConfig,
        flags: AblationFlags,
    ) -> Result<IterationRecord, TrainingError> {
        rets_iteration(self, base_train, features, config, flags)
    }

    pub fn is_done(&self, config: &RetsConfig) -> bool {
        self.iteration >= config.max_iterations
    }
}

/// One iteration of base-session training on `trainer`.
pub fn rets_iteration(
    trainer: &mut Trainer,
    base_train: &[Labeled],
    features: &FeatureStore,
    config: &RetsConfig,
    flags: AblationFlags,
) -> Result<IterationRecord, TrainingError> {
    if trainer.bundle.is_frozen() {
        return Err(TrainingError::Frozen);
    }
    config.validate(trainer.bundle.prototypes.len())?;
    let iteration = trainer.iteration;
    let mut rng = iteration_rng(config.seed, iteration);
    let batch = sample_iteration(base_train, config, flags, &mut rng)?;
    let dropout_seed = rng.random::<u64>();
    let out = loss_and_grads(&trainer.bundle, &batch, features, config.reduction, flags, Some(dropout_seed))?;
    if !out.loss.is_finite() {
        return Err(TrainingError::NonFiniteLoss { iteration });
    }
    if !grads_finite(&out.grads) {
        return Err(TrainingError::NonFiniteGradient { iteration });
    }
    let lr = cosine_lr(config.lr, iteration, config.max_iterations);
    trainer.optimizer.step(trainer.bundle.params_mut(), &out.grads, lr);
    apply_stats(&mut trainer.bundle, &out.stats);
    trainer.iteration += 1;
    Ok(IterationRecord {
        iteration,
        loss: out.loss,
        lr,
        seed: config.seed,
        episodes: batch.episodes.len(),
    })
}

/// Trains until `config.max_iterations`, calling `on_iteration` after each
/// step.
pub fn train_with<F>(
    trainer: &mut Trainer,
    base_train: &[Labeled],
    features: &FeatureStore,
    config: &RetsConfig,
    flags: AblationFlags,
    mut on_iteration: F,
) -> Result<(), TrainingError>
where
    F: FnMut(&IterationRecord, &Trainer),
{
    if !trainer.is_done(config) {
        trainer.bundle.set_norm_mode(NormMode::Train);
    }
    while !trainer.is_done(config) {
        let record = trainer.step(base_train, features, config, flags)?;
        on_iteration(&record, trainer);
    }
    Ok(())
}

/// Fresh base-session training; returns the trained model and its log.
pub fn train_base(
    bundle: ModelBundle,
    base_train: &[Labeled],
    features: &FeatureStore,
    config: &RetsConfig,
    flags: AblationFlags,
) -> Result<(ModelBundle, Vec<IterationRecord>), TrainingError> {
    let mut trainer = Trainer::new(bundle, config);
    let mut log = Vec::with_capacity(config.max_iterations);
    train_with(&mut trainer, base_train, features, config, flags, |r, _| log.push(r.clone()))?;
    Ok((trainer.bundle, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// Expands the classifier with random prototypes for the session's classes
/// and retrains every parameter on the session's samples alone.
pub fn finetune_baseline(
    bundle: &ModelBundle,
    session_train: &[Labeled],
    features: &FeatureStore,
    config: &FinetuneConfig,
) -> Result<ModelBundle, TrainingError> {
    if session_train.is_empty() {
        return Err(TrainingError::InvalidConfig("finetuning needs training samples".into()));
    }
    if !(config.lr > 0.0) {
        return Err(TrainingError::InvalidConfig("lr must be positive".into()));
    }
    let mut rng = seeded_rng(config.seed);
    let new_labels = LabelSpace::from_records(session_train);
    let fresh = init_base_prototypes(new_labels.labels(), bundle.d(), &mut rng)?;
    let mut model = bundle.clone();
    model.prototypes = merge(&bundle.prototypes, &fresh)?;
    model.prototypes.learnable = true;
    model.set_frozen(false);
    model.set_norm_mode(NormMode::Train);

    let samples: Vec<&Labeled> = session_train.iter().collect();
    let owned: Vec<Labeled> = session_train.to_vec();
    let mut optimizer = Sgd::new(config.momentum, config.weight_decay);
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut stats = ForwardStats::default();
        let emb = embed_on_tape(&model, &mut tape, &vars, features, &samples, &mut stats.backbone)?;
        let mut rel = StatLog::new();
        let mut dropout = Some(seeded_rng(rng.random::<u64>()));
        let logits = model
            .relation
            .forward(&mut tape, &vars.relation, emb, vars.prototypes, dropout.as_mut(), &mut rel);
        stats.relation.push(rel);
        let t = targets(&owned, model.prototypes.registry())?;
        let loss_var = tape.softmax_cross_entropy(logits, t);
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss { iteration: step });
        }
        let grads = tape.backward(loss_var);
        let grads = model.gradients(&vars, &grads);
        if !grads_finite(&grads) {
            return Err(TrainingError::NonFiniteGradient { iteration: step });
        }
        optimizer.step(model.params_mut(), &grads, config.lr);
        apply_stats(&mut model, &stats);
    }
    Ok(model)
}
