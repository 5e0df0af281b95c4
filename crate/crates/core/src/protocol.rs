//! Session structure and all dataset/episode sampling.
//!
//! A [`SessionSchedule`] is a base session followed by incremental sessions,
//! each incremental session holding exactly `n_way` classes with `k_shot`
//! training samples per class. Label spaces are pairwise disjoint.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub String);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        Self(s.into())
    }
}

/// Identifies one clip: a relative path or a synthetic id.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleRef(pub String);

impl fmt::Display for SampleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleRef {
    fn from(s: &str) -> Self {
        Self(s.into())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub sample: SampleRef,
    pub label: ClassId,
}

impl Labeled {
    pub fn new(sample: impl Into<SampleRef>, label: impl Into<ClassId>) -> Self {
        Self {
            sample: sample.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("schedule needs a nonempty base session")]
    EmptyBase,
    #[error("label {label} appears in sessions {first} and {second}")]
    LabelOverlap {
        label: ClassId,
        first: usize,
        second: usize,
    },
    #[error("session {session}: class {label} has {have} training samples, needs {need}")]
    UnderSupplied {
        session: usize,
        label: ClassId,
        have: usize,
        need: usize,
    },
    #[error("session {session}: has {have} classes, an {need}-way session needs exactly {need}")]
    WrongWay {
        session: usize,
        have: usize,
        need: usize,
    },
    #[error("session {session}: test label {label} is not in the session label space")]
    UnknownTestLabel { session: usize, label: ClassId },
    #[error("duplicate label {0} in label space")]
    DuplicateLabel(ClassId),
    #[error("session index {index} out of range for {len} sessions")]
    SessionOutOfRange { index: usize, len: usize },
    #[error("n_way and k_shot must be at least 1")]
    ZeroShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplingError {
    #[error("need {need} classes, base set has {have}")]
    NotEnoughClasses { need: usize, have: usize },
    #[error("class {label} has {have} samples, need {need}")]
    NotEnoughSamples {
        label: ClassId,
        need: usize,
        have: usize,
    },
    #[error("sample counts must be at least 1")]
    ZeroCount,
}

/// Ordered set of class identifiers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct LabelSpace {
    labels: Vec<ClassId>,
}

impl LabelSpace {
    pub fn new(labels: Vec<ClassId>) -> Result<Self, ProtocolError> {
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(ProtocolError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// Labels in first-seen order.
    pub fn from_records(records: &[Labeled]) -> Self {
        let mut seen = BTreeSet::new();
        let labels = records
            .iter()
            .filter(|r| seen.insert(&r.label))
            .map(|r| r.label.clone())
            .collect();
        Self { labels }
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &ClassId) -> bool {
        self.labels.contains(label)
    }

    pub fn position(&self, label: &ClassId) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn is_disjoint(&self, other: &LabelSpace) -> bool {
        self.labels.iter().all(|l| !other.contains(l))
    }
}

impl TryFrom<Vec<ClassId>> for LabelSpace {
    type Error = ProtocolError;
    fn try_from(v: Vec<ClassId>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LabelSpace> for Vec<ClassId> {
    fn from(s: LabelSpace) -> Self {
        s.labels
    }
}

/// Raw train/test records for one session, before validation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub train: Vec<Labeled>,
    pub test: Vec<Labeled>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub index: usize,
    pub label_space: LabelSpace,
    pub train_manifest: Vec<Labeled>,
    pub test_manifest: Vec<Labeled>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub sessions: Vec<SessionDescriptor>,
    pub n_way: usize,
    pub k_shot: usize,
}

impl SessionSchedule {
    pub fn base(&self) -> &SessionDescriptor {
        &self.sessions[0]
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Number of incremental sessions.
    pub fn incremental_len(&self) -> usize {
        self.sessions.len().saturating_sub(1)
    }

    /// Every class in registration order: session order, then manifest order.
    pub fn all_labels(&self) -> Vec<ClassId> {
        self.sessions
            .iter()
            .flat_map(|s| s.label_space.labels().iter().cloned())
            .collect()
    }
}

/// Groups records by label, preserving first-seen label order and record order.
pub(crate) fn group_by_label(records: &[Labeled]) -> Vec<(ClassId, Vec<&Labeled>)> {
    let space = LabelSpace::from_records(records);
    let mut groups: Vec<(ClassId, Vec<&Labeled>)> = space
        .labels()
        .iter()
        .map(|l| (l.clone(), Vec::new()))
        .collect();
    for r in records {
        let pos = space.position(&r.label).expect("label registered");
        groups[pos].1.push(r);
    }
    groups
}

/// Validates and assembles a schedule.
///
/// Incremental training manifests with more than `k_shot` samples for a class
/// are cut down to exactly `k_shot` by seeded sampling (kept in manifest
/// order); an incremental session must carry exactly `n_way` classes.
pub fn build_schedule<R: Rng + ?Sized>(
    base: SessionManifest,
    incremental: Vec<SessionManifest>,
    n_way: usize,
    k_shot: usize,
    rng: &mut R,
) -> Result<SessionSchedule, ProtocolError> {
    if n_way == 0 || k_shot == 0 {
        return Err(ProtocolError::ZeroShape);
    }
    if base.train.is_empty() {
        return Err(ProtocolError::EmptyBase);
    }
    let mut sessions = Vec::with_capacity(incremental.len() + 1);
    sessions.push(descriptor(0, base.train, base.test)?);

    for (offset, manifest) in incremental.into_iter().enumerate() {
        let index = offset + 1;
        let groups = group_by_label(&manifest.train);
        if groups.len() != n_way {
            return Err(ProtocolError::WrongWay {
                session: index,
                have: groups.len(),
                need: n_way,
            });
        }
        let mut train = Vec::with_capacity(n_way * k_shot);
        for (label, members) in &groups {
            if members.len() < k_shot {
                return Err(ProtocolError::UnderSupplied {
                    session: index,
                    label: label.clone(),
                    have: members.len(),
                    need: k_shot,
                });
            }
            let mut picked = index::sample(rng, members.len(), k_shot).into_vec();
            picked.sort_unstable();
            train.extend(picked.into_iter().map(|i| members[i].clone()));
        }
        sessions.push(descriptor(index, train, manifest.test)?);
    }

    for (i, a) in sessions.iter().enumerate() {
        for b in &sessions[i + 1..] {
            if let Some(label) = a.label_space.labels().iter().find(|l| b.label_space.contains(l)) {
                return Err(ProtocolError::LabelOverlap {
                    label: label.clone(),
                    first: a.index,
                    second: b.index,
                });
            }
        }
    }

    Ok(SessionSchedule {
        sessions,
        n_way,
        k_shot,
    })
}

fn descriptor(
    index: usize,
    train: Vec<Labeled>,
    test: Vec<Labeled>,
) -> Result<SessionDescriptor, ProtocolError> {
    let label_space = LabelSpace::from_records(&train);
    if let Some(bad) = test.iter().find(|r| !label_space.contains(&r.label)) {
        return Err(ProtocolError::UnknownTestLabel {
            session: index,
            label: bad.label.clone(),
        });
    }
    Ok(SessionDescriptor {
        index,
        label_space,
        train_manifest: train,
        test_manifest: test,
    })
}

/// Union of the test manifests of sessions `0..=l`.
pub fn cumulative_test_set(
    schedule: &SessionSchedule,
    l: usize,
) -> Result<Vec<Labeled>, ProtocolError> {
    if l >= schedule.sessions.len() {
        return Err(ProtocolError::SessionOutOfRange {
            index: l,
            len: schedule.sessions.len(),
        });
    }
    Ok(schedule.sessions[..=l]
        .iter()
        .flat_map(|s| s.test_manifest.iter().cloned())
        .collect())
}

/// One simulated N-way K-shot task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Class-grouped: `k` samples of `label_set[0]`, then `label_set[1]`, ...
    pub support: Vec<Labeled>,
    pub label_set: LabelSpace,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.label_set.len()
    }

    pub fn k_shot(&self) -> usize {
        if self.label_set.is_empty() {
            0
        } else {
            self.support.len() / self.label_set.len()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySet {
    pub samples: Vec<Labeled>,
}

pub fn sample_episode<R: Rng + ?Sized>(
    base_train: &[Labeled],
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Episode, SamplingError> {
    if n == 0 || k == 0 {
        return Err(SamplingError::ZeroCount);
    }
    let groups = group_by_label(base_train);
    if groups.len() < n {
        return Err(SamplingError::NotEnoughClasses {
            need: n,
            have: groups.len(),
        });
    }
    let mut chosen = index::sample(rng, groups.len(), n).into_vec();
    chosen.sort_unstable();
    let mut support = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    for c in chosen {
        let (label, members) = &groups[c];
        support.extend(pick(label, members, k, rng)?);
        labels.push(label.clone());
    }
    Ok(Episode {
        support,
        label_set: LabelSpace { labels },
    })
}

/// Draws `q_per_class` samples from every class of the base set.
pub fn sample_query_set<R: Rng + ?Sized>(
    base_train: &[Labeled],
    q_per_class: usize,
    rng: &mut R,
) -> Result<QuerySet, SamplingError> {
    if q_per_class == 0 {
        return Err(SamplingError::ZeroCount);
    }
    let groups = group_by_label(base_train);
    let mut samples = Vec::with_capacity(groups.len() * q_per_class);
    for (label, members) in &groups {
        samples.extend(pick(label, members, q_per_class, rng)?);
    }
    Ok(QuerySet { samples })
}

fn pick<R: Rng + ?Sized>(
    label: &ClassId,
    members: &[&Labeled],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Labeled>, SamplingError> {
    if members.len() < k {
        return Err(SamplingError::NotEnoughSamples {
            label: label.clone(),
            need: k,
            have: members.len(),
        });
    }
    Ok(index::sample(rng, members.len(), k)
        .into_iter()
        .map(|i| members[i].clone())
        .collect())
}
