//! The full learnable model: backbone, projection module, relation module and
//! base prototypes.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::backbone::{BackboneKind, BackboneParams};
use crate::digest::{Hasher, ParamDigest};
use crate::drpm::DrpmParams;
use crate::error::ModelError;
use crate::layers::{bind, NormMode};
use crate::protocol::ClassId;
use crate::prototype::{init_base_prototypes, PrototypeMatrix};
use crate::relation::RelationParams;
use crate::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    pub backbone: BackboneKind,
    pub rm_hidden: [usize; 2],
    pub dropout: f64,
    /// Latent width of the projection blocks; `d` when unset.
    pub d_latent: Option<usize>,
    pub row_softmax: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            backbone: BackboneKind::Cnn {
                channels: [16, 32, 64],
            },
            rm_hidden: [128, 64],
            dropout: 0.2,
            d_latent: None,
            row_softmax: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, input: (usize, usize)) -> Result<(), ModelError> {
        let produced = match &self.backbone {
            BackboneKind::Identity => input.0 * input.1,
            BackboneKind::Cnn { channels } => channels[2],
        };
        if produced != self.d {
            return Err(ModelError::InvalidConfig(format!(
                "backbone produces width {produced} but d = {}",
                self.d
            )));
        }
        if self.rm_hidden.contains(&0) || self.d_latent == Some(0) {
            return Err(ModelError::InvalidConfig("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Digests of the four parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BundleDigest {
    pub backbone: ParamDigest,
    pub drpm: ParamDigest,
    pub relation: ParamDigest,
    pub prototypes: ParamDigest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub drpm: DrpmParams,
    pub relation: RelationParams,
    /// Base prototypes `P₀`, one learnable row per base class.
    pub prototypes: PrototypeMatrix,
}

/// Tape leaves of one bundle, grouped by parameter set.
pub struct BundleVars {
    pub backbone: Vec<Var>,
    pub drpm: Vec<Var>,
    pub relation: Vec<Var>,
    pub prototypes: Var,
}

impl ModelBundle {
    pub fn new(
        config: ModelConfig,
        input: (usize, usize),
        base_labels: &[ClassId],
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate(input)?;
        let mut rng = seeded_rng(seed);
        let backbone = BackboneParams::new(&config.backbone, input, &mut rng)?;
        let d = config.d;
        let mut drpm = DrpmParams::new(d, config.d_latent.unwrap_or(d), &mut rng);
        drpm.row_softmax = config.row_softmax;
        let relation = RelationParams::new(d, config.rm_hidden, config.dropout, &mut rng);
        let prototypes = init_base_prototypes(base_labels, d, &mut rng)
            .map_err(|e| ModelError::InvalidConfig(format!("{e}")))?;
        Ok(Self {
            config,
            backbone,
            drpm,
            relation,
            prototypes,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.backbone.norm_mode = mode;
        self.drpm.norm_mode = mode;
        self.relation.norm_mode = mode;
    }

    /// Freezes or unfreezes the backbone, projection and relation modules.
    pub fn set_frozen(&mut self, flag: bool) {
        self.backbone.set_frozen(flag);
        self.drpm.set_frozen(flag);
        self.relation.set_frozen(flag);
    }

    pub fn is_frozen(&self) -> bool {
        self.backbone.frozen || self.drpm.frozen || self.relation.frozen
    }

    pub fn digests(&self) -> BundleDigest {
        BundleDigest {
            backbone: self.backbone.digest(),
            drpm: self.drpm.digest(),
            relation: self.relation.digest(),
            prototypes: self.prototypes.digest(),
        }
    }

    /// Digest over every parameter set together.
    pub fn digest(&self) -> ParamDigest {
        let d = self.digests();
        let mut h = Hasher::new();
        for part in [d.backbone, d.drpm, d.relation, d.prototypes] {
            h.bytes(&part.0);
        }
        h.finish()
    }

    /// Puts every parameter on the tape; frozen sets become constants.
    pub fn bind(&self, tape: &mut Tape) -> BundleVars {
        BundleVars {
            backbone: bind(tape, &self.backbone.params(), !self.backbone.frozen),
            drpm: bind(tape, &self.drpm.params(), !self.drpm.frozen),
            relation: bind(tape, &self.relation.params(), !self.relation.frozen),
            prototypes: tape.leaf(self.prototypes.rows().clone(), self.prototypes.learnable),
        }
    }

    /// Parameters in `[θ…, φ…, ψ…, P₀]` order, matching [`Self::gradients`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.extend(self.drpm.params_mut());
        out.extend(self.relation.params_mut());
        out.push(self.prototypes.rows_mut());
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.backbone.params();
        out.extend(self.drpm.params());
        out.extend(self.relation.params());
        out.push(self.prototypes.rows());
        out
    }

    /// Gradients in [`Self::params_mut`] order, with `None` for frozen sets.
    pub fn gradients(&self, vars: &BundleVars, grads: &Gradients) -> Vec<Option<Tensor>> {
        let pick = |vs: &[Var], live: bool| -> Vec<Option<Tensor>> {
            vs.iter()
                .map(|&v| if live { Some(grads.tensor(v)) } else { None })
                .collect()
        };
        let mut out = pick(&vars.backbone, !self.backbone.frozen);
        out.extend(pick(&vars.drpm, !self.drpm.frozen));
        out.extend(pick(&vars.relation, !self.relation.frozen));
        out.push(if self.prototypes.learnable {
            Some(grads.tensor(vars.prototypes))
        } else {
            None
        });
        out
    }
}
