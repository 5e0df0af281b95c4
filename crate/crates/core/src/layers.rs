//! Building blocks shared by the backbone, the projection module and the
//! relation module.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::digest::Hasher;
use crate::features::normal_vec;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Whether normalization layers use batch statistics or stored ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Train,
    Eval,
}

/// Batch statistics in the order the normalization layers ran.
pub type StatLog = Vec<BatchStats>;

/// Hands out parameter leaves in the order a module registered them.
pub struct VarCursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> VarCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, next: 0 }
    }

    pub fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Puts every tensor on the tape, as parameters or constants.
pub fn bind(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|t| tape.leaf((*t).clone(), trainable))
        .collect()
}

/// Affine map `x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = libm::sqrt(2.0 / input as f64);
        Self {
            weight: Tensor::from_vec(&[input, output], normal_vec(rng, input * output, std)),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, vars: &mut VarCursor<'_>, x: Var) -> Var {
        let (w, b) = (vars.take(), vars.take());
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }

    /// Same affine map without a tape, on one row.
    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        let out = self.output_width();
        let mut y = self.bias.data().to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += xi * self.weight.data()[i * out + j];
            }
        }
        y
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl Norm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    /// Training mode normalizes with batch statistics and returns them so the
    /// owner can fold them into the running estimates. Eval mode uses the
    /// running estimates only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &mut VarCursor<'_>,
        x: Var,
        mode: NormMode,
        stats: &mut StatLog,
    ) -> Var {
        let (g, b) = (vars.take(), vars.take());
        match mode {
            NormMode::Train => {
                let (y, batch) = tape.batch_norm(x, g, b, NORM_EPS);
                stats.push(batch);
                y
            }
            NormMode::Eval => tape.channel_affine(
                x,
                g,
                b,
                &self.running_mean,
                &self.running_var,
                NORM_EPS,
            ),
        }
    }

    pub fn absorb(&mut self, batch: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&batch.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
    }

    pub fn hash_into(&self, h: &mut Hasher) {
        h.tensor(&self.gamma)
            .tensor(&self.beta)
            .f64s(&self.running_mean)
            .f64s(&self.running_var);
    }
}

/// Inverted-dropout mask: zeros with probability `rate`, `1/(1-rate)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect()
}
