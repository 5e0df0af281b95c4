//! The relation module: a learnable metric over (embedding, prototype) pairs.
//!
//! Each pair is encoded as the concatenation `[embedding, prototype]` and
//! passed through three affine stages. Normalization, ReLU and dropout sit
//! between consecutive stages; the last stage emits one score.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::backbone::Embedding;
use crate::digest::{Hasher, ParamDigest};
use crate::error::ModelError;
use crate::layers::{bind, dropout_mask, Linear, Norm, NormMode, StatLog, VarCursor};
use crate::protocol::ClassId;
use crate::prototype::PrototypeMatrix;
use crate::tensor::Tensor;
use crate::SeededRng;

/// Query rows scored per tape when evaluating without gradients.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationParams {
    pub stages: [Linear; 3],
    pub norms: [Norm; 2],
    pub dropout_rate: f64,
    pub frozen: bool,
    pub norm_mode: NormMode,
}

/// Scores aligned with the rows of a prototype matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
}

impl RelationParams {
    /// `2d → hidden[0] → hidden[1] → 1`.
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: [usize; 2], dropout_rate: f64, rng: &mut R) -> Self {
        Self {
            stages: [
                Linear::init(2 * d, hidden[0], rng),
                Linear::init(hidden[0], hidden[1], rng),
                Linear::init(hidden[1], 1, rng),
            ],
            norms: [Norm::new(hidden[0]), Norm::new(hidden[1])],
            dropout_rate,
            frozen: false,
            norm_mode: NormMode::Train,
        }
    }

    pub fn embedding_width(&self) -> usize {
        self.stages[0].input_width() / 2
    }

    pub fn set_frozen(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let [s0, s1, s2] = &self.stages;
        let [n0, n1] = &self.norms;
        let mut out = Vec::with_capacity(10);
        out.extend(s0.params());
        out.extend(n0.params());
        out.extend(s1.params());
        out.extend(n1.params());
        out.extend(s2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let [s0, s1, s2] = &mut self.stages;
        let [n0, n1] = &mut self.norms;
        let mut out = Vec::with_capacity(10);
        out.extend(s0.params_mut());
        out.extend(n0.params_mut());
        out.extend(s1.params_mut());
        out.extend(n1.params_mut());
        out.extend(s2.params_mut());
        out
    }

    pub fn digest(&self) -> ParamDigest {
        let mut h = Hasher::new();
        h.str("relation");
        for s in &self.stages {
            h.tensor(&s.weight).tensor(&s.bias);
        }
        for n in &self.norms {
            n.hash_into(&mut h);
        }
        h.f64(self.dropout_rate);
        h.finish()
    }

    /// Records `[queries × prototypes]` scores. Dropout runs only in train
    /// mode and only when an rng is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        embeddings: Var,
        prototypes: Var,
        mut dropout: Option<&mut SeededRng>,
        stats: &mut StatLog,
    ) -> Var {
        let q = tape.value(embeddings).rows();
        let c = tape.value(prototypes).rows();
        let mut cursor = VarCursor::new(vars);
        let mut x = tape.pair_concat(embeddings, prototypes);
        for i in 0..2 {
            x = self.stages[i].forward(tape, &mut cursor, x);
            x = self.norms[i].forward(tape, &mut cursor, x, self.norm_mode, stats);
            x = tape.relu(x);
            if self.norm_mode == NormMode::Train && self.dropout_rate > 0.0 {
                if let Some(rng) = dropout.as_deref_mut() {
                    let len = tape.value(x).len();
                    x = tape.mul_const(x, dropout_mask(rng, len, self.dropout_rate));
                }
            }
        }
        x = self.stages[2].forward(tape, &mut cursor, x);
        tape.reshape(x, &[q, c])
    }

    pub fn absorb(&mut self, stats: &[BatchStats]) {
        if self.frozen {
            return;
        }
        for (n, s) in self.norms.iter_mut().zip(stats) {
            n.absorb(s);
        }
    }

    /// Scores every embedding against every prototype row without gradients.
    pub fn score_matrix(&self, embeddings: &[Embedding], prototypes: &Tensor) -> Result<Tensor, ModelError> {
        let d = self.embedding_width();
        if prototypes.cols() != d {
            return Err(ModelError::Width {
                expected: d,
                found: prototypes.cols(),
            });
        }
        if let Some(e) = embeddings.iter().find(|e| e.len() != d) {
            return Err(ModelError::Width {
                expected: d,
                found: e.len(),
            });
        }
        let c = prototypes.rows();
        let mut out = Vec::with_capacity(embeddings.len() * c);
        for chunk in embeddings.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &self.params(), false);
            let rows: Vec<Vec<f64>> = chunk.iter().map(|e| e.0.clone()).collect();
            let e = tape.constant(Tensor::from_rows(&rows, d));
            let p = tape.constant(prototypes.clone());
            let s = self.forward(&mut tape, &vars, e, p, None, &mut StatLog::new());
            out.extend_from_slice(tape.value(s).data());
        }
        Ok(Tensor::from_vec(&[embeddings.len(), c], out))
    }
}

pub fn relation_score(
    embedding: &Embedding,
    prototype: &[f64],
    params: &RelationParams,
) -> Result<f64, ModelError> {
    let p = Tensor::from_vec(&[1, prototype.len()], prototype.to_vec());
    Ok(params.score_matrix(core::slice::from_ref(embedding), &p)?.data()[0])
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn classify(
    embedding: &Embedding,
    prototypes: &PrototypeMatrix,
    params: &RelationParams,
) -> Result<(ClassId, ScoreVector), ModelError> {
    let mut all = classify_batch(core::slice::from_ref(embedding), prototypes, params)?;
    Ok(all.pop().expect("one embedding, one prediction"))
}

pub fn classify_batch(
    embeddings: &[Embedding],
    prototypes: &PrototypeMatrix,
    params: &RelationParams,
) -> Result<Vec<(ClassId, ScoreVector)>, ModelError> {
    if prototypes.is_empty() {
        return Err(ModelError::EmptyPrototypes);
    }
    let scores = params.score_matrix(embeddings, prototypes.rows())?;
    Ok((0..embeddings.len())
        .map(|i| {
            let row = scores.row(i).to_vec();
            let best = argmax(&row).expect("nonempty prototype matrix");
            (
                prototypes.registry()[best].clone(),
                ScoreVector { values: row },
            )
        })
        .collect())
}
