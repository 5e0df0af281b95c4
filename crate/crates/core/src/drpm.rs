//! Dynamic relation projection: refines the prototypes of the current
//! session against those of the previous one.
//!
//! Two blocks `f1`, `f2` (affine map, normalization across the class
//! dimension, ReLU) take the prototype rows into a shared latent space. The
//! relation weights are `M = f1(P_init) · f2(P_pre)ᵀ` and the refined
//! prototypes are `P_re = M · P_pre`.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::digest::{Hasher, ParamDigest};
use crate::layers::{bind, Linear, Norm, NormMode, StatLog, VarCursor};
use crate::prototype::PrototypeMatrix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DrpmError {
    #[error("prototype width {found} does not match module width {expected}")]
    Width { expected: usize, found: usize },
    #[error("previous prototype matrix is empty")]
    EmptyPrevious,
    #[error("refined prototypes contain non-finite values")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBlock {
    pub linear: Linear,
    pub norm: Norm,
}

impl ProjectionBlock {
    fn init<R: Rng + ?Sized>(d: usize, d_latent: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(d, d_latent, rng),
            norm: Norm::new(d_latent),
        }
    }

    fn identity(d: usize) -> Self {
        Self {
            linear: Linear::identity(d),
            norm: Norm::new(d),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        vars: &mut VarCursor<'_>,
        x: Var,
        mode: NormMode,
        bypass_norm: bool,
        stats: &mut StatLog,
    ) -> Var {
        let y = self.linear.forward(tape, vars, x);
        let y = if bypass_norm {
            // keep the cursor aligned with the registered parameters
            vars.take();
            vars.take();
            y
        } else {
            self.norm.forward(tape, vars, y, mode, stats)
        };
        tape.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrpmParams {
    pub f1: ProjectionBlock,
    pub f2: ProjectionBlock,
    pub frozen: bool,
    pub norm_mode: NormMode,
    /// Skips both normalization layers. Only the identity constructor sets it.
    pub bypass_norm: bool,
    /// Row-softmax over `M`; off by default.
    pub row_softmax: bool,
}

/// `[N_init × N_pre]` relation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationWeights {
    pub values: Tensor,
}

impl DrpmParams {
    pub fn new<R: Rng + ?Sized>(d: usize, d_latent: usize, rng: &mut R) -> Self {
        Self {
            f1: ProjectionBlock::init(d, d_latent, rng),
            f2: ProjectionBlock::init(d, d_latent, rng),
            frozen: false,
            norm_mode: NormMode::Train,
            bypass_norm: false,
            row_softmax: false,
        }
    }

    /// Identity affine maps with normalization bypassed: each block is a ReLU.
    pub fn identity(d: usize) -> Self {
        Self {
            f1: ProjectionBlock::identity(d),
            f2: ProjectionBlock::identity(d),
            frozen: false,
            norm_mode: NormMode::Eval,
            bypass_norm: true,
            row_softmax: false,
        }
    }

    pub fn input_width(&self) -> usize {
        self.f1.linear.input_width()
    }

    pub fn latent_width(&self) -> usize {
        self.f1.linear.output_width()
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        [&self.f1, &self.f2]
            .into_iter()
            .flat_map(|b| {
                let [w, bias] = b.linear.params();
                let [g, beta] = b.norm.params();
                [w, bias, g, beta]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.f1, &mut self.f2]
            .into_iter()
            .flat_map(|b| {
                let [w, bias] = b.linear.params_mut();
                let [g, beta] = b.norm.params_mut();
                [w, bias, g, beta]
            })
            .collect()
    }

    pub fn digest(&self) -> ParamDigest {
        let mut h = Hasher::new();
        h.str("drpm");
        for b in [&self.f1, &self.f2] {
            h.tensor(&b.linear.weight).tensor(&b.linear.bias);
            b.norm.hash_into(&mut h);
        }
        h.u64(self.bypass_norm as u64).u64(self.row_softmax as u64);
        h.finish()
    }

    /// Records `M` and `P_re` on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        p_init: Var,
        p_pre: Var,
        stats: &mut StatLog,
    ) -> (Var, Var) {
        let mut cursor = VarCursor::new(vars);
        let h1 = self
            .f1
            .forward(tape, &mut cursor, p_init, self.norm_mode, self.bypass_norm, stats);
        let h2 = self
            .f2
            .forward(tape, &mut cursor, p_pre, self.norm_mode, self.bypass_norm, stats);
        let mut m = tape.matmul_bt(h1, h2);
        if self.row_softmax {
            m = tape.softmax_rows(m);
        }
        let refined = tape.matmul(m, p_pre);
        (m, refined)
    }

    pub fn absorb(&mut self, stats: &[BatchStats]) {
        if self.frozen || self.bypass_norm {
            return;
        }
        if let [s1, s2] = stats {
            self.f1.norm.absorb(s1);
            self.f2.norm.absorb(s2);
        }
    }

    fn check(&self, p_init: &PrototypeMatrix, p_pre: &PrototypeMatrix) -> Result<(), DrpmError> {
        if p_pre.is_empty() {
            return Err(DrpmError::EmptyPrevious);
        }
        for p in [p_init, p_pre] {
            if p.dim() != self.input_width() {
                return Err(DrpmError::Width {
                    expected: self.input_width(),
                    found: p.dim(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, p_init: &PrototypeMatrix, p_pre: &PrototypeMatrix) -> Result<(Tensor, Tensor), DrpmError> {
        self.check(p_init, p_pre)?;
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &self.params(), false);
        let a = tape.constant(p_init.rows().clone());
        let b = tape.constant(p_pre.rows().clone());
        let (m, refined) = self.forward(&mut tape, &vars, a, b, &mut StatLog::new());
        Ok((tape.value(m).clone(), tape.value(refined).clone()))
    }
}

pub fn relation_weights(
    p_init: &PrototypeMatrix,
    p_pre: &PrototypeMatrix,
    params: &DrpmParams,
) -> Result<RelationWeights, DrpmError> {
    let (m, _) = params.run(p_init, p_pre)?;
    Ok(RelationWeights { values: m })
}

/// `P_re = M · P_pre`, carrying the registry of `p_init`.
pub fn refine(
    p_init: &PrototypeMatrix,
    p_pre: &PrototypeMatrix,
    params: &DrpmParams,
) -> Result<PrototypeMatrix, DrpmError> {
    let (_, refined) = params.run(p_init, p_pre)?;
    PrototypeMatrix::new(refined, p_init.registry().to_vec(), false)
        .map_err(|_| DrpmError::NonFinite)
}
