//! The embedding extractor: feature map → `d`-dimensional embedding.
//!
//! Two architectures share one interface. `Identity` flattens the feature map
//! and is used as a sanity path on synthetic vectors. `Cnn` is a desk-scale
//! network of three blocks (3×3 conv, batch norm, ReLU, 2×2 max pool)
//! followed by global average pooling; its last block width is `d`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::digest::{Hasher, ParamDigest};
use crate::error::ModelError;
use crate::features::{normal_vec, FeatureMap};
use crate::layers::{bind, Norm, NormMode, StatLog, VarCursor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneKind {
    Identity,
    Cnn { channels: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    /// `[out_ch, in_ch, 3, 3]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Identity,
    Cnn { blocks: Vec<ConvBlock> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub arch: Arch,
    /// Expected `(frames, bins)` of every input map.
    pub input: (usize, usize),
    pub frozen: bool,
    pub norm_mode: NormMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl BackboneParams {
    pub fn new<R: Rng + ?Sized>(
        kind: &BackboneKind,
        input: (usize, usize),
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        match kind {
            BackboneKind::Identity => Ok(Self::identity(input)),
            BackboneKind::Cnn { channels } => Self::cnn(input, *channels, rng),
        }
    }

    pub fn identity(input: (usize, usize)) -> Self {
        Self {
            arch: Arch::Identity,
            input,
            frozen: false,
            norm_mode: NormMode::Train,
        }
    }

    pub fn cnn<R: Rng + ?Sized>(
        input: (usize, usize),
        channels: [usize; 3],
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if input.0 < 8 || input.1 < 8 {
            return Err(ModelError::InvalidConfig(format!(
                "three 2x2 pools need an input of at least 8x8, got {}x{}",
                input.0, input.1
            )));
        }
        if channels.contains(&0) {
            return Err(ModelError::InvalidConfig("zero-width conv block".into()));
        }
        let mut blocks = Vec::with_capacity(3);
        let mut cin = 1;
        for &cout in &channels {
            let std = libm::sqrt(2.0 / (cin * 9) as f64);
            blocks.push(ConvBlock {
                weight: Tensor::from_vec(&[cout, cin, 3, 3], normal_vec(rng, cout * cin * 9, std)),
                bias: Tensor::zeros(&[cout]),
                norm: Norm::new(cout),
            });
            cin = cout;
        }
        Ok(Self {
            arch: Arch::Cnn { blocks },
            input,
            frozen: false,
            norm_mode: NormMode::Train,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        match &self.arch {
            Arch::Identity => self.input.0 * self.input.1,
            Arch::Cnn { blocks } => blocks.last().map_or(0, |b| b.weight.shape()[0]),
        }
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match &self.arch {
            Arch::Identity => Vec::new(),
            Arch::Cnn { blocks } => blocks
                .iter()
                .flat_map(|b| [&b.weight, &b.bias, &b.norm.gamma, &b.norm.beta])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.arch {
            Arch::Identity => Vec::new(),
            Arch::Cnn { blocks } => blocks
                .iter_mut()
                .flat_map(|b| {
                    let [g, be] = b.norm.params_mut();
                    [&mut b.weight, &mut b.bias, g, be]
                })
                .collect(),
        }
    }

    /// Digest of every parameter and normalization statistic.
    pub fn digest(&self) -> ParamDigest {
        let mut h = Hasher::new();
        h.str("backbone");
        if let Arch::Cnn { blocks } = &self.arch {
            for b in blocks {
                h.tensor(&b.weight).tensor(&b.bias);
                b.norm.hash_into(&mut h);
            }
        }
        h.finish()
    }

    pub fn check_input(&self, map: &FeatureMap) -> Result<(), ModelError> {
        if map.shape() != self.input {
            return Err(ModelError::InputShape {
                expected: self.input,
                found: map.shape(),
            });
        }
        Ok(())
    }

    /// Stacks maps into the tensor layout `forward` expects.
    pub fn input_tensor(&self, maps: &[&FeatureMap]) -> Result<Tensor, ModelError> {
        let (frames, bins) = self.input;
        let mut data = Vec::with_capacity(maps.len() * frames * bins);
        for m in maps {
            self.check_input(m)?;
            data.extend_from_slice(&m.values);
        }
        Ok(match self.arch {
            Arch::Identity => Tensor::from_vec(&[maps.len(), frames * bins], data),
            Arch::Cnn { .. } => Tensor::from_vec(&[maps.len(), 1, frames, bins], data),
        })
    }

    /// Records the forward pass; returns `[batch, d]` embeddings.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var, stats: &mut StatLog) -> Var {
        match &self.arch {
            Arch::Identity => input,
            Arch::Cnn { blocks } => {
                let mut cursor = VarCursor::new(vars);
                let mut x = input;
                for b in blocks {
                    let (w, bias) = (cursor.take(), cursor.take());
                    x = tape.conv3x3(x, w, bias);
                    x = b.norm.forward(tape, &mut cursor, x, self.norm_mode, stats);
                    x = tape.relu(x);
                    x = tape.max_pool2(x);
                }
                tape.global_avg_pool(x)
            }
        }
    }

    /// Folds training-mode batch statistics into the running estimates,
    /// unless frozen.
    pub fn absorb(&mut self, stats: &[crate::autodiff::BatchStats]) {
        if self.frozen {
            return;
        }
        if let Arch::Cnn { blocks } = &mut self.arch {
            for (b, s) in blocks.iter_mut().zip(stats) {
                b.norm.absorb(s);
            }
        }
    }

    /// Embeds a batch without recording gradients.
    pub fn embed_batch(&self, maps: &[&FeatureMap]) -> Result<Vec<Embedding>, ModelError> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params(), false);
        let input = tape.constant(self.input_tensor(maps)?);
        let out = self.forward(&mut tape, &vars, input, &mut StatLog::new());
        let value = tape.value(out);
        Ok((0..value.rows()).map(|i| Embedding(value.row(i).to_vec())).collect())
    }
}

/// Embeds one feature map with the current parameters and normalization mode.
pub fn embed(feature_map: &FeatureMap, params: &BackboneParams) -> Result<Embedding, ModelError> {
    Ok(params
        .embed_batch(&[feature_map])?
        .pop()
        .expect("one input, one embedding"))
}

/// Returns `params` with its frozen flag set to `flag`.
pub fn set_frozen(mut params: BackboneParams, flag: bool) -> BackboneParams {
    params.set_frozen(flag);
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use alloc::vec;

    fn map(frames: usize, bins: usize, seed: u64) -> FeatureMap {
        let mut rng = seeded_rng(seed);
        FeatureMap::new(frames, bins, normal_vec(&mut rng, frames * bins, 1.0), 0)
    }

    #[test]
    fn identity_backbone_returns_the_input_vector() {
        let p = BackboneParams::identity((1, 4));
        let m = FeatureMap::new(1, 4, vec![1.0, -2.0, 3.5, 0.0], 0);
        assert_eq!(embed(&m, &p).unwrap().0, m.values);
        assert_eq!(p.embedding_dim(), 4);
    }

    #[test]
    fn cnn_embedding_has_configured_width_and_is_deterministic_in_eval() {
        let mut p = BackboneParams::cnn((40, 64), [16, 32, 64], &mut seeded_rng(1)).unwrap();
        p.norm_mode = NormMode::Eval;
        let m = map(40, 64, 2);
        let a = embed(&m, &p).unwrap();
        let b = embed(&m, &p).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
        assert!(a.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_is_a_model_error() {
        let p = BackboneParams::cnn((8, 8), [2, 2, 4], &mut seeded_rng(1)).unwrap();
        let err = embed(&map(8, 9, 0), &p).unwrap_err();
        assert!(matches!(err, ModelError::InputShape { .. }));
        assert!(BackboneParams::cnn((4, 8), [2, 2, 4], &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn freezing_is_idempotent_and_blocks_statistics() {
        let p = BackboneParams::cnn((8, 8), [2, 2, 4], &mut seeded_rng(1)).unwrap();
        let mut frozen = set_frozen(set_frozen(p.clone(), true), true);
        assert!(frozen.frozen);
        let before = frozen.digest();
        let stats = vec![
            crate::autodiff::BatchStats {
                mean: vec![5.0; 2],
                var: vec![5.0; 2],
            };
            3
        ];
        frozen.absorb(&stats);
        assert_eq!(before, frozen.digest());
        let mut live = set_frozen(frozen, false);
        live.absorb(&stats);
        assert_ne!(before, live.digest());
    }
}
