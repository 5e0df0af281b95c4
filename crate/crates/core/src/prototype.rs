//! Class prototypes and the class → row registry.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Embedding;
use crate::digest::{Hasher, ParamDigest};
use crate::features::normal_vec;
use crate::protocol::{ClassId, LabelSpace};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrototypeError {
    #[error("cannot build a prototype from an empty support set")]
    EmptySupport,
    #[error("embedding widths differ: {expected} vs {found}")]
    Width { expected: usize, found: usize },
    #[error("class {0} is not registered")]
    UnknownLabel(ClassId),
    #[error("class {0} is registered twice")]
    Collision(ClassId),
    #[error("non-finite prototype entry")]
    NonFinite,
}

/// Row-per-class prototype table.
///
/// Row `i` belongs to `registry[i]`; the registry never holds duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMatrix {
    rows: Tensor,
    registry: Vec<ClassId>,
    pub learnable: bool,
}

impl PrototypeMatrix {
    pub fn new(rows: Tensor, registry: Vec<ClassId>, learnable: bool) -> Result<Self, PrototypeError> {
        assert_eq!(rows.rows(), registry.len(), "one registry entry per row");
        LabelSpace::new(registry.clone()).map_err(|e| match e {
            crate::protocol::ProtocolError::DuplicateLabel(l) => PrototypeError::Collision(l),
            _ => unreachable!("LabelSpace::new only reports duplicates"),
        })?;
        if !rows.is_finite() {
            return Err(PrototypeError::NonFinite);
        }
        Ok(Self {
            rows,
            registry,
            learnable,
        })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            rows: Tensor::zeros(&[0, d]),
            registry: Vec::new(),
            learnable: false,
        }
    }

    pub fn from_vectors(
        labels: Vec<ClassId>,
        vectors: &[Vec<f64>],
        d: usize,
    ) -> Result<Self, PrototypeError> {
        for v in vectors {
            if v.len() != d {
                return Err(PrototypeError::Width {
                    expected: d,
                    found: v.len(),
                });
            }
        }
        Self::new(Tensor::from_rows(vectors, d), labels, false)
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Tensor {
        &mut self.rows
    }

    pub fn registry(&self) -> &[ClassId] {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.registry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registry.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn row_of(&self, label: &ClassId) -> Option<usize> {
        self.registry.iter().position(|l| l == label)
    }

    pub fn digest(&self) -> ParamDigest {
        let mut h = Hasher::new();
        h.str("prototypes").tensor(&self.rows);
        for l in &self.registry {
            h.str(&l.0);
        }
        h.finish()
    }

    /// Row indices kept by [`pseudo_base_subset`], in order.
    pub fn kept_rows(&self, excluded: &[ClassId]) -> Result<Vec<usize>, PrototypeError> {
        if let Some(bad) = excluded.iter().find(|l| self.row_of(l).is_none()) {
            return Err(PrototypeError::UnknownLabel((*bad).clone()));
        }
        Ok((0..self.len())
            .filter(|&i| !excluded.contains(&self.registry[i]))
            .collect())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: Tensor::from_vec(&[rows.len(), d], data),
            registry: rows.iter().map(|&r| self.registry[r].clone()).collect(),
            learnable: self.learnable,
        }
    }
}

/// Arithmetic mean of the support embeddings, summed in input order.
pub fn compute_prototype(support: &[Embedding]) -> Result<Vec<f64>, PrototypeError> {
    let first = support.first().ok_or(PrototypeError::EmptySupport)?;
    let d = first.len();
    let mut acc = alloc::vec![0.0; d];
    for e in support {
        if e.len() != d {
            return Err(PrototypeError::Width {
                expected: d,
                found: e.len(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&e.0) {
            *a += v;
        }
    }
    let n = support.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Learnable base prototypes drawn from `N(0, 1/d)`, one row per label.
pub fn init_base_prototypes<R: Rng + ?Sized>(
    labels: &[ClassId],
    d: usize,
    rng: &mut R,
) -> Result<PrototypeMatrix, PrototypeError> {
    let std = 1.0 / libm::sqrt(d as f64);
    let rows = Tensor::from_vec(&[labels.len(), d], normal_vec(rng, labels.len() * d, std));
    PrototypeMatrix::new(rows, labels.to_vec(), true)
}

/// Rows of `p0` whose labels are not excluded, in their original order.
pub fn pseudo_base_subset(
    p0: &PrototypeMatrix,
    excluded: &[ClassId],
) -> Result<PrototypeMatrix, PrototypeError> {
    let kept = p0.kept_rows(excluded)?;
    Ok(p0.select_rows(&kept))
}

/// Rows of `a` followed by rows of `b`.
pub fn merge(a: &PrototypeMatrix, b: &PrototypeMatrix) -> Result<PrototypeMatrix, PrototypeError> {
    if a.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.dim() != b.dim() {
        return Err(PrototypeError::Width {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if let Some(l) = b.registry.iter().find(|l| a.row_of(l).is_some()) {
        return Err(PrototypeError::Collision(l.clone()));
    }
    let mut data = a.rows.data().to_vec();
    data.extend_from_slice(b.rows.data());
    let mut registry = a.registry.clone();
    registry.extend(b.registry.iter().cloned());
    Ok(PrototypeMatrix {
        rows: Tensor::from_vec(&[registry.len(), a.dim()], data),
        registry,
        learnable: a.learnable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use alloc::format;
    use alloc::vec;

    fn labels(n: usize) -> Vec<ClassId> {
        (0..n).map(|i| ClassId(format!("c{i}"))).collect()
    }

    #[test]
    fn mean_of_one_and_of_two() {
        let v = Embedding(vec![1.5, -2.0]);
        assert_eq!(compute_prototype(&[v.clone()]).unwrap(), v.0);
        let p = compute_prototype(&[Embedding(vec![1.0, 2.0]), Embedding(vec![3.0, 4.0])]).unwrap();
        assert_eq!(p, vec![2.0, 3.0]);
        assert_eq!(compute_prototype(&[]), Err(PrototypeError::EmptySupport));
        assert!(matches!(
            compute_prototype(&[Embedding(vec![1.0]), Embedding(vec![1.0, 2.0])]),
            Err(PrototypeError::Width { .. })
        ));
    }

    #[test]
    fn base_prototypes_have_one_row_per_class_and_are_seeded() {
        let a = init_base_prototypes(&labels(55), 64, &mut seeded_rng(3)).unwrap();
        assert_eq!(a.rows().shape(), &[55, 64]);
        assert_eq!(a.registry().len(), 55);
        assert!(a.learnable);
        let b = init_base_prototypes(&labels(55), 64, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn base_prototype_scale_is_inverse_sqrt_d() {
        let d = 64;
        let p = init_base_prototypes(&labels(200), d, &mut seeded_rng(8)).unwrap();
        let data = p.rows().data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = libm::sqrt(data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0));
        let target = 1.0 / libm::sqrt(d as f64);
        // 12800 draws: the sample std has relative spread ~ 1/sqrt(2n) ≈ 0.6%
        assert!((std - target).abs() / target < 0.03, "std {std} vs {target}");
        assert!(mean.abs() < 4.0 * target / libm::sqrt(n));
    }

    #[test]
    fn pseudo_base_keeps_order_and_rows() {
        let p0 = init_base_prototypes(&labels(55), 8, &mut seeded_rng(1)).unwrap();
        assert_eq!(pseudo_base_subset(&p0, &[]).unwrap(), p0);
        let excluded: Vec<ClassId> = [3, 10, 20, 21, 54].iter().map(|&i| labels(55)[i].clone()).collect();
        let kept = pseudo_base_subset(&p0, &excluded).unwrap();
        assert_eq!(kept.len(), 50);
        for (i, l) in kept.registry().iter().enumerate() {
            let src = p0.row_of(l).unwrap();
            assert_eq!(kept.row(i), p0.row(src));
            if i > 0 {
                assert!(p0.row_of(&kept.registry()[i - 1]).unwrap() < src);
            }
        }
        assert!(matches!(
            pseudo_base_subset(&p0, &[ClassId("nope".into())]),
            Err(PrototypeError::UnknownLabel(_))
        ));
    }

    #[test]
    fn merge_concatenates_and_rejects_collisions() {
        let all = labels(55);
        let p0 = init_base_prototypes(&all, 4, &mut seeded_rng(1)).unwrap();
        let base = pseudo_base_subset(&p0, &all[50..]).unwrap();
        let new = init_base_prototypes(&all[50..], 4, &mut seeded_rng(2)).unwrap();
        let merged = merge(&base, &new).unwrap();
        assert_eq!(merged.len(), 55);
        for i in 0..50 {
            assert_eq!(merged.row(i), base.row(i));
        }
        for i in 0..5 {
            assert_eq!(merged.row(50 + i), new.row(i));
        }
        assert_eq!(merge(&base, &PrototypeMatrix::empty(4)).unwrap(), base);
        assert!(matches!(merge(&base, &base), Err(PrototypeError::Collision(_))));
    }
}
