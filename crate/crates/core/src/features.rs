//! Feature maps, the in-memory feature store, and synthetic Gaussian-cluster data.
//!
//! Filter-bank extraction from audio lives in the `fcac` crate; everything here
//! is pure and allocation-only.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Hasher;
use crate::protocol::{ClassId, Labeled, SampleRef, SessionManifest};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("waveform has {len} samples, shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("no features for sample {0}")]
    Missing(SampleRef),
    #[error("feature fingerprint {found:016x} does not match store fingerprint {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("feature map is {found:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite feature value in {0}")]
    NonFinite(SampleRef),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// A `[frames × bins]` log-energy matrix, row-major by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
    /// Identifies the extraction parameters that produced this map.
    pub fingerprint: u64,
}

impl FeatureMap {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>, fingerprint: u64) -> Self {
        assert_eq!(frames * bins, values.len(), "feature map size mismatch");
        Self {
            frames,
            bins,
            values,
            fingerprint,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Feature maps keyed by sample, all sharing one fingerprint and shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    maps: BTreeMap<SampleRef, FeatureMap>,
    fingerprint: Option<u64>,
    shape: Option<(usize, usize)>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample: SampleRef, map: FeatureMap) -> Result<(), FeatureError> {
        if !map.is_finite() {
            return Err(FeatureError::NonFinite(sample));
        }
        match self.fingerprint {
            Some(fp) if fp != map.fingerprint => {
                return Err(FeatureError::FingerprintMismatch {
                    expected: fp,
                    found: map.fingerprint,
                })
            }
            _ => self.fingerprint = Some(map.fingerprint),
        }
        match self.shape {
            Some(s) if s != map.shape() => {
                return Err(FeatureError::ShapeMismatch {
                    expected: s,
                    found: map.shape(),
                })
            }
            _ => self.shape = Some(map.shape()),
        }
        self.maps.insert(sample, map);
        Ok(())
    }

    pub fn get(&self, sample: &SampleRef) -> Result<&FeatureMap, FeatureError> {
        self.maps
            .get(sample)
            .ok_or_else(|| FeatureError::Missing(sample.clone()))
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    /// `(frames, bins)` shared by every map.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Parameters of a Gaussian-cluster data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub within_std: f64,
    pub between_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.dim == 0 {
            return Err(FeatureError::InvalidConfig("dim must be at least 1".into()));
        }
        if !(self.within_std >= 0.0 && self.within_std.is_finite()) {
            return Err(FeatureError::InvalidConfig("within_std must be >= 0".into()));
        }
        if !(self.between_std >= 0.0 && self.between_std.is_finite()) {
            return Err(FeatureError::InvalidConfig("between_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Label used for synthetic class `i`.
pub fn synthetic_label(i: usize) -> ClassId {
    ClassId(format!("class{i:03}"))
}

/// Class means with spread `between_std`, samples around them with spread
/// `within_std`. Samples come out class by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<(Vec<f64>, ClassId)>, FeatureError> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let between = Normal::new(0.0, spec.between_std).expect("validated std");
    let within = Normal::new(0.0, spec.within_std).expect("validated std");
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.dim).map(|_| between.sample(&mut rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let v = mean.iter().map(|m| m + within.sample(&mut rng)).collect();
            out.push((v, synthetic_label(c)));
        }
    }
    Ok(out)
}

/// Layout of a synthetic few-shot class-incremental benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFcacSpec {
    pub base_classes: usize,
    pub incremental_sessions: usize,
    pub n_way: usize,
    /// Training samples per base class.
    pub base_train_per_class: usize,
    /// Training samples per incremental class, before K-shot selection.
    pub novel_train_per_class: usize,
    pub test_per_class: usize,
    /// Feature map shape; `frames * bins` is the cluster dimension.
    pub frames: usize,
    pub bins: usize,
    pub within_std: f64,
    pub between_std: f64,
    pub seed: u64,
}

/// Generated sessions plus the features of every sample.
#[derive(Clone, Debug)]
pub struct SyntheticFcac {
    pub base: SessionManifest,
    pub incremental: Vec<SessionManifest>,
    pub features: FeatureStore,
}

impl SyntheticFcacSpec {
    pub fn n_classes(&self) -> usize {
        self.base_classes + self.incremental_sessions * self.n_way
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Hasher::new();
        h.str("synthetic-fcac")
            .u64(self.n_classes() as u64)
            .u64(self.frames as u64)
            .u64(self.bins as u64)
            .f64(self.within_std)
            .f64(self.between_std)
            .u64(self.seed);
        h.finish().short()
    }

    pub fn generate(&self) -> Result<SyntheticFcac, FeatureError> {
        let per_class = self.base_train_per_class.max(self.novel_train_per_class) + self.test_per_class;
        let spec = SyntheticSpec {
            n_classes: self.n_classes(),
            dim: self.frames * self.bins,
            samples_per_class: per_class,
            within_std: self.within_std,
            between_std: self.between_std,
            seed: self.seed,
        };
        let data = generate_synthetic(&spec)?;
        let fingerprint = self.fingerprint();
        let mut features = FeatureStore::new();
        let mut base = SessionManifest::default();
        let mut incremental: Vec<SessionManifest> =
            (0..self.incremental_sessions).map(|_| SessionManifest::default()).collect();

        for (c, chunk) in data.chunks(per_class).enumerate() {
            let (manifest, n_train) = if c < self.base_classes {
                (&mut base, self.base_train_per_class)
            } else {
                let s = (c - self.base_classes) / self.n_way;
                (&mut incremental[s], self.novel_train_per_class)
            };
            for (i, (values, label)) in chunk.iter().enumerate() {
                let split = if i < n_train {
                    "train"
                } else if i >= per_class - self.test_per_class {
                    "test"
                } else {
                    continue;
                };
                let sample = SampleRef(format!("syn/{label}/{i}"));
                features.insert(
                    sample.clone(),
                    FeatureMap::new(self.frames, self.bins, values.clone(), fingerprint),
                )?;
                let rec = Labeled {
                    sample,
                    label: label.clone(),
                };
                if split == "train" {
                    manifest.train.push(rec);
                } else {
                    manifest.test.push(rec);
                }
            }
        }
        Ok(SyntheticFcac {
            base,
            incremental,
            features,
        })
    }
}

/// Draws `n` standard-normal values scaled by `std`.
pub(crate) fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| std * dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(within: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 2,
            dim: 4,
            samples_per_class: 5,
            within_std: within,
            between_std: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn zero_within_std_collapses_onto_means() {
        let data = generate_synthetic(&spec(0.0)).unwrap();
        assert_eq!(data.len(), 10);
        for chunk in data.chunks(5) {
            for (v, _) in chunk {
                assert_eq!(v, &chunk[0].0);
            }
        }
        assert_ne!(data[0].0, data[5].0);
    }

    #[test]
    fn shape_and_labels() {
        let data = generate_synthetic(&spec(0.5)).unwrap();
        assert_eq!(data.len(), 10);
        let labels: alloc::collections::BTreeSet<_> = data.iter().map(|(_, l)| l.clone()).collect();
        assert_eq!(labels.len(), 2);
        assert!(data.iter().all(|(v, _)| v.len() == 4));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(0.1);
        s.dim = 0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(-1.0);
        s.dim = 3;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn store_rejects_mixed_fingerprints() {
        let mut store = FeatureStore::new();
        store
            .insert("a".into(), FeatureMap::new(1, 2, alloc::vec![0.0, 1.0], 1))
            .unwrap();
        let err = store
            .insert("b".into(), FeatureMap::new(1, 2, alloc::vec![0.0, 1.0], 2))
            .unwrap_err();
        assert!(matches!(err, FeatureError::FingerprintMismatch { .. }));
        let err = store
            .insert("c".into(), FeatureMap::new(2, 1, alloc::vec![0.0, 1.0], 1))
            .unwrap_err();
        assert!(matches!(err, FeatureError::ShapeMismatch { .. }));
        assert!(matches!(store.get(&"zz".into()), Err(FeatureError::Missing(_))));
    }

    #[test]
    fn synthetic_benchmark_layout() {
        let s = SyntheticFcacSpec {
            base_classes: 4,
            incremental_sessions: 2,
            n_way: 2,
            base_train_per_class: 6,
            novel_train_per_class: 3,
            test_per_class: 2,
            frames: 2,
            bins: 2,
            within_std: 0.1,
            between_std: 1.0,
            seed: 3,
        };
        let data = s.generate().unwrap();
        assert_eq!(data.base.train.len(), 24);
        assert_eq!(data.base.test.len(), 8);
        assert_eq!(data.incremental.len(), 2);
        assert_eq!(data.incremental[1].train.len(), 6);
        assert_eq!(data.incremental[1].test.len(), 4);
        assert_eq!(data.features.len(), 24 + 8 + 2 * (6 + 4));
    }
}
