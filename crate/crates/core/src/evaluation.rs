//! Incremental-session evaluation and its metrics.
//!
//! The backbone, projection and relation modules stay frozen throughout. In
//! every incremental session the new classes get support-mean prototypes, the
//! merged matrix is refined by the projection module, and the result is scored
//! on the union of all test sets seen so far. [`EvalOptions`] selects what the
//! refinement is anchored to and how the base session is scored.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Embedding;
use crate::digest::ParamDigest;
use crate::drpm::refine;
use crate::error::Error;
use crate::features::FeatureStore;
use crate::layers::NormMode;
use crate::model::{BundleDigest, ModelBundle};
use crate::protocol::{cumulative_test_set, ClassId, LabelSpace, Labeled, SessionSchedule};
use crate::prototype::{compute_prototype, merge, PrototypeMatrix};
use crate::relation::classify_batch;
use crate::training::{finetune_baseline, FinetuneConfig};

/// Maps embedded per backbone call.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("metric input is empty")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{module} parameters changed during session {session}: {before} -> {after}")]
pub struct IntegrityError {
    pub module: String,
    pub session: usize,
    pub before: String,
    pub after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_index: usize,
    /// Fraction correct, in `[0, 1]`.
    pub accuracy: f64,
    pub n_test: usize,
    pub n_classes_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sessions: Vec<SessionResult>,
    pub aa: f64,
    pub pd: f64,
}

impl RunReport {
    pub fn from_sessions(sessions: Vec<SessionResult>) -> Result<Self, MetricError> {
        let acc: Vec<f64> = sessions.iter().map(|s| s.accuracy).collect();
        Ok(Self {
            aa: average_accuracy(&acc)?,
            pd: performance_drop(&acc)?,
            sessions,
        })
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.accuracy).collect()
    }
}

pub fn session_accuracy(predictions: &[ClassId], labels: &[ClassId]) -> Result<f64, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean over every session, the base session included.
pub fn average_accuracy(accuracies: &[f64]) -> Result<f64, MetricError> {
    if accuracies.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// First session's accuracy minus the last session's.
pub fn performance_drop(accuracies: &[f64]) -> Result<f64, MetricError> {
    match (accuracies.first(), accuracies.last()) {
        (Some(first), Some(last)) => Ok(first - last),
        _ => Err(MetricError::Empty),
    }
}

/// Embeds records with the bundle's backbone in its current mode.
pub fn embed_records(
    bundle: &ModelBundle,
    records: &[Labeled],
    features: &FeatureStore,
) -> Result<Vec<Embedding>, Error> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EMBED_CHUNK) {
        let maps = chunk
            .iter()
            .map(|r| features.get(&r.sample))
            .collect::<Result<Vec<_>, _>>()?;
        out.extend(bundle.backbone.embed_batch(&maps)?);
    }
    Ok(out)
}

/// Support-mean prototypes for every class in `records`, in first-seen order.
pub fn support_prototypes(
    bundle: &ModelBundle,
    records: &[Labeled],
    features: &FeatureStore,
) -> Result<PrototypeMatrix, Error> {
    let space = LabelSpace::from_records(records);
    let embeddings = embed_records(bundle, records, features)?;
    let mut rows = Vec::with_capacity(space.len());
    for label in space.labels() {
        let support: Vec<Embedding> = records
            .iter()
            .zip(&embeddings)
            .filter(|(r, _)| r.label == *label)
            .map(|(_, e)| e.clone())
            .collect();
        rows.push(compute_prototype(&support)?);
    }
    Ok(PrototypeMatrix::from_vectors(space.labels().to_vec(), &rows, bundle.d())?)
}

/// Accuracy of `prototypes` on the cumulative test set of session `l`.
pub fn evaluate_session(
    bundle: &ModelBundle,
    prototypes: &PrototypeMatrix,
    schedule: &SessionSchedule,
    l: usize,
    features: &FeatureStore,
) -> Result<SessionResult, Error> {
    let test = cumulative_test_set(schedule, l)?;
    let embeddings = embed_records(bundle, &test, features)?;
    let predictions: Vec<ClassId> = classify_batch(&embeddings, prototypes, &bundle.relation)?
        .into_iter()
        .map(|(label, _)| label)
        .collect();
    let labels: Vec<ClassId> = test.iter().map(|r| r.label.clone()).collect();
    Ok(SessionResult {
        session_index: l,
        accuracy: session_accuracy(&predictions, &labels)?,
        n_test: test.len(),
        n_classes_seen: prototypes.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct FrozenDigests {
    backbone: ParamDigest,
    drpm: ParamDigest,
    relation: ParamDigest,
}

impl FrozenDigests {
    fn of(bundle: &ModelBundle) -> Self {
        let d = bundle.digests();
        Self {
            backbone: d.backbone,
            drpm: d.drpm,
            relation: d.relation,
        }
    }

    fn verify(&self, bundle: &ModelBundle, session: usize) -> Result<(), IntegrityError> {
        let now = Self::of(bundle);
        for (module, before, after) in [
            ("backbone", self.backbone, now.backbone),
            ("drpm", self.drpm, now.drpm),
            ("relation", self.relation, now.relation),
        ] {
            if before != after {
                return Err(IntegrityError {
                    module: module.into(),
                    session,
                    before: before.hex(),
                    after: after.hex(),
                });
            }
        }
        Ok(())
    }
}

/// The matrix each incremental session is refined against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineAnchor {
    /// The base prototypes `P₀` in every session. Old classes keep their
    /// unrefined prototypes in the growing matrix.
    #[default]
    Base,
    /// The refined prototypes of the previous session, which also seed the
    /// next merged matrix.
    Refined,
    /// The merged, unrefined prototypes of the previous session.
    Merged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Skip refinement; classify against the merged prototypes.
    pub no_drpm: bool,
    /// Score session 0 against `refine(P₀, P₀)` instead of `P₀`.
    pub refine_base_session: bool,
    pub anchor: RefineAnchor,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            no_drpm: false,
            refine_base_session: true,
            anchor: RefineAnchor::Base,
        }
    }
}

/// Result of an incremental run with the final prototype matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalRun {
    pub report: RunReport,
    /// The matrix scored in the last session.
    pub prototypes: PrototypeMatrix,
    /// Prototype row count after each session.
    pub prototype_counts: Vec<usize>,
    /// Module digests before session 1 and after the final session.
    pub digests_before: BundleDigest,
    pub digests_after: BundleDigest,
}

/// Runs every session of `schedule` with frozen modules.
pub fn run_incremental(
    bundle: &ModelBundle,
    schedule: &SessionSchedule,
    features: &FeatureStore,
    options: &EvalOptions,
) -> Result<IncrementalRun, Error> {
    let mut model = bundle.clone();
    model.set_frozen(true);
    model.set_norm_mode(NormMode::Eval);
    model.prototypes.learnable = false;
    let guard = FrozenDigests::of(&model);
    let digests_before = model.digests();
    let p0 = model.prototypes.clone();

    let mut scored = if options.refine_base_session && !options.no_drpm {
        refine(&p0, &p0, &model.drpm)?
    } else {
        p0.clone()
    };
    let mut sessions = Vec::with_capacity(schedule.len());
    let mut counts = Vec::with_capacity(schedule.len());
    sessions.push(evaluate_session(&model, &scored, schedule, 0, features)?);
    counts.push(scored.len());

    // `stored` is extended by each session; `pre` is the refinement anchor
    let mut stored = p0.clone();
    let mut pre = p0.clone();
    for l in 1..schedule.len() {
        let p_new = support_prototypes(&model, &schedule.sessions[l].train_manifest, features)?;
        let p_init = merge(&stored, &p_new)?;
        scored = if options.no_drpm {
            p_init.clone()
        } else {
            refine(&p_init, &pre, &model.drpm)?
        };
        sessions.push(evaluate_session(&model, &scored, schedule, l, features)?);
        counts.push(scored.len());
        match options.anchor {
            RefineAnchor::Base => stored = p_init,
            RefineAnchor::Merged => {
                stored = p_init.clone();
                pre = p_init;
            }
            RefineAnchor::Refined => {
                stored = scored.clone();
                pre = scored.clone();
            }
        }
        guard.verify(&model, l)?;
    }
    Ok(IncrementalRun {
        report: RunReport::from_sessions(sessions)?,
        prototypes: scored,
        prototype_counts: counts,
        digests_before,
        digests_after: model.digests(),
    })
}

/// The finetune baseline: retrain everything on each session's samples and
/// classify against the expanded prototype matrix directly.
pub fn run_finetune(
    bundle: &ModelBundle,
    schedule: &SessionSchedule,
    features: &FeatureStore,
    config: &FinetuneConfig,
) -> Result<RunReport, Error> {
    let mut model = bundle.clone();
    model.set_norm_mode(NormMode::Eval);
    let mut sessions = Vec::with_capacity(schedule.len());
    sessions.push(evaluate_session(&model, &model.prototypes, schedule, 0, features)?);
    for l in 1..schedule.len() {
        let session_cfg = FinetuneConfig {
            seed: config.seed.wrapping_add(l as u64),
            ..config.clone()
        };
        model = finetune_baseline(&model, &schedule.sessions[l].train_manifest, features, &session_cfg)?;
        model.set_norm_mode(NormMode::Eval);
        sessions.push(evaluate_session(&model, &model.prototypes, schedule, l, features)?);
    }
    Ok(RunReport::from_sessions(sessions)?)
}
