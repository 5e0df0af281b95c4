//! Stochastic gradient descent with momentum, weight decay and a cosine
//! learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One velocity buffer per parameter, created on the first step.
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. Parameters whose gradient is
    /// `None` are left untouched, velocity included.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter count changed");
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let pd = p.data_mut();
            for ((pi, gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// `base · ½(1 + cos(π·step/total))`; `base` when `total` is zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn plain_step_without_momentum_or_decay() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(vec![&mut p], &[Some(Tensor::from_vec(&[2], vec![0.5, -1.0]))], 0.1);
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn momentum_accumulates_and_decay_pulls_to_zero() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]);
        let mut opt = Sgd::new(0.9, 0.1);
        let g = [Some(Tensor::from_vec(&[1], vec![0.0]))];
        opt.step(vec![&mut p], &g, 1.0);
        // v = 0.1, p = 0.9
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        opt.step(vec![&mut p], &g, 1.0);
        // v = 0.09 + 0.09, p = 0.72
        assert!((p.data()[0] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut a = Tensor::from_vec(&[1], vec![3.0]);
        let mut b = Tensor::from_vec(&[1], vec![3.0]);
        let mut opt = Sgd::new(0.9, 0.5);
        opt.step(vec![&mut a, &mut b], &[None, Some(Tensor::from_vec(&[1], vec![1.0]))], 0.1);
        assert_eq!(a.data(), &[3.0]);
        assert_ne!(b.data(), &[3.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 7, 0), 0.1);
    }
}
