//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it in reverse and
//! accumulates gradients only into nodes that depend on a parameter leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    PairConcat(Var, Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for running-statistic updates.
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` did not influence the output.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(outer, channels, inner)` view of a tensor with channel axis 1.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let channels = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (outer, channels, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf helper: trainable when `trainable` is set, constant otherwise.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_bt inner dimensions differ");
        let mut out = vec![0.0; m * n];
        matmul_bt_into(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMulBt(a, b), ng)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        let n = value.cols();
        assert_eq!(b.len(), n, "bias width mismatch");
        for row in value.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.len(), self.value(b).len(), "add shape mismatch");
        for (v, bv) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += bv;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v *= s;
        }
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.len(), factor.len());
        for (v, f) in value.data_mut().iter_mut().zip(&factor) {
            *v *= f;
        }
        let ng = self.needs(x);
        self.push(value, Op::MulConst(x, factor), ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(src.row(r));
        }
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&shape, data), Op::GatherRows(x, rows), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows width mismatch");
        let mut shape = av.shape().to_vec();
        shape[0] += bv.rows();
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(&shape, data), Op::ConcatRows(a, b), ng)
    }

    /// All pairs `[left_i, right_j]` as rows, row index `i * right.rows() + j`.
    pub fn pair_concat(&mut self, left: Var, right: Var) -> Var {
        let (lv, rv) = (self.value(left), self.value(right));
        let (q, dl) = (lv.rows(), lv.cols());
        let (c, dr) = (rv.rows(), rv.cols());
        let mut data = Vec::with_capacity(q * c * (dl + dr));
        for i in 0..q {
            for j in 0..c {
                data.extend_from_slice(lv.row(i));
                data.extend_from_slice(rv.row(j));
            }
        }
        let ng = self.needs(left) || self.needs(right);
        self.push(
            Tensor::from_vec(&[q * c, dl + dr], data),
            Op::PairConcat(left, right),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Training-mode normalization over every axis except axis 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (outer, ch, inner) = channel_layout(xv.shape());
        let count = (outer * inner) as f64;
        let xd = xv.data();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                mean[c] += xd[base..base + inner].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                var[c] += xd[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / count).collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|s| if count > 1.0 { s / (count - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        (
            out,
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// Evaluation-mode normalization with fixed statistics.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, mean, &inv_std);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let xv = self.value(x);
        let (outer, ch, inner) = channel_layout(xv.shape());
        assert_eq!(mean.len(), ch, "normalization channel mismatch");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.data().to_vec();
        let mut out = xv.clone();
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xhat[i] - mean[c]) * inv_std[c];
                    out.data_mut()[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        (out, xhat)
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x` is `[batch, in_ch, h, w]`, `w` is `[out_ch, in_ch, 3, 3]`, `b` is `[out_ch]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (batch, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let cout = wv.shape()[0];
        assert_eq!(wv.shape()[1], cin, "conv input channel mismatch");
        let mut out = vec![0.0; batch * cout * h * wd];
        let xd = xv.data();
        let wdata = wv.data();
        for n in 0..batch {
            for co in 0..cout {
                let obase = (n * cout + co) * h * wd;
                out[obase..obase + h * wd].fill(bv.data()[co]);
                for ci in 0..cin {
                    let ibase = (n * cin + ci) * h * wd;
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let wgt = wdata[((co * cin + ci) * 3 + ki) * 3 + kj];
                            conv_tap(
                                &xd[ibase..ibase + h * wd],
                                &mut out[obase..obase + h * wd],
                                h,
                                wd,
                                ki,
                                kj,
                                wgt,
                            );
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[batch, cout, h, wd], out),
            Op::Conv3x3 { x, w, b },
            ng,
        )
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (batch, ch, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(batch * ch * oh * ow);
        let mut argmax = Vec::with_capacity(batch * ch * oh * ow);
        let xd = xv.data();
        for plane in 0..batch * ch {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::from_vec(&[batch, ch, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            ng,
        )
    }

    /// `[batch, ch, h, w]` → `[batch, ch]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (batch, ch) = (xv.shape()[0], xv.shape()[1]);
        let inner: usize = xv.shape()[2..].iter().product();
        let out: Vec<f64> = xv
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::from_vec(&[batch, ch], out), Op::GlobalAvgPool(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(&targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += log_z - row[t];
            softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        let ng = self.needs(logits);
        self.push(
            Tensor::from_vec(&[1], vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Gradients of the scalar `output` with respect to every node that needs one.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.len()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accumulate(grads, *a, |ga| matmul_bt_into(g, bv.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(av.data(), g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.accumulate(grads, *a, |ga| matmul_into(g, bv.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(g, av.data(), gb, m, n, k));
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                self.accumulate(grads, *x, |gx| add_assign(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_assign(ga, g));
                self.accumulate(grads, *b, |gb| add_assign(gb, g));
            }
            Op::Relu(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &o), &gi) in gx.iter_mut().zip(out).zip(g) {
                        if o > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += s * gi;
                    }
                });
            }
            Op::MulConst(x, factor) => {
                self.accumulate(grads, *x, |gx| {
                    for ((d, &f), &gi) in gx.iter_mut().zip(factor).zip(g) {
                        *d += f * gi;
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_assign(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, |ga| add_assign(ga, &g[..split]));
                self.accumulate(grads, *b, |gb| add_assign(gb, &g[split..]));
            }
            Op::PairConcat(left, right) => {
                let (lv, rv) = (self.value(*left), self.value(*right));
                let (q, dl) = (lv.rows(), lv.cols());
                let (c, dr) = (rv.rows(), rv.cols());
                let w = dl + dr;
                self.accumulate(grads, *left, |gl| {
                    for i in 0..q {
                        for j in 0..c {
                            let row = &g[(i * c + j) * w..(i * c + j + 1) * w];
                            add_assign(&mut gl[i * dl..(i + 1) * dl], &row[..dl]);
                        }
                    }
                });
                self.accumulate(grads, *right, |gr| {
                    for i in 0..q {
                        for j in 0..c {
                            let row = &g[(i * c + j) * w..(i * c + j + 1) * w];
                            add_assign(&mut gr[j * dr..(j + 1) * dr], &row[dl..]);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_assign(gx, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, ch, inner) = channel_layout(node.value.shape());
                let count = (outer * inner) as f64;
                let (sum_g, sum_gx) = channel_sums(g, xhat, outer, ch, inner);
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gam[c] * inv_std[c] / count;
                            for i in base..base + inner {
                                gx[i] += k * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| add_assign(gg, &sum_gx));
                self.accumulate(grads, *beta, |gb| add_assign(gb, &sum_g));
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, ch, inner) = channel_layout(node.value.shape());
                let (sum_g, sum_gx) = channel_sums(g, xhat, outer, ch, inner);
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            for i in base..base + inner {
                                gx[i] += g[i] * gam[c] * inv_std[c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| add_assign(gg, &sum_gx));
                self.accumulate(grads, *beta, |gb| add_assign(gb, &sum_g));
            }
            Op::Conv3x3 { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (batch, cin, h, wd) =
                    (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let cout = wv.shape()[0];
                let plane = h * wd;
                self.accumulate(grads, *b, |gb| {
                    for n in 0..batch {
                        for (co, gbc) in gb.iter_mut().enumerate() {
                            let base = (n * cout + co) * plane;
                            *gbc += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for n in 0..batch {
                        for co in 0..cout {
                            let gplane = &g[(n * cout + co) * plane..(n * cout + co + 1) * plane];
                            for ci in 0..cin {
                                let xplane =
                                    &xv.data()[(n * cin + ci) * plane..(n * cin + ci + 1) * plane];
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        gw[((co * cin + ci) * 3 + ki) * 3 + kj] +=
                                            conv_tap_grad_w(xplane, gplane, h, wd, ki, kj);
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for n in 0..batch {
                        for co in 0..cout {
                            let gplane = &g[(n * cout + co) * plane..(n * cout + co + 1) * plane];
                            for ci in 0..cin {
                                let xgrad = &mut gx[(n * cin + ci) * plane..(n * cin + ci + 1) * plane];
                                for ki in 0..3 {
                                    for kj in 0..3 {
                                        let wgt = wv.data()[((co * cin + ci) * 3 + ki) * 3 + kj];
                                        conv_tap_grad_x(gplane, xgrad, h, wd, ki, kj, wgt);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |gx| {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[2..].iter().product();
                self.accumulate(grads, *x, |gx| {
                    for (chunk, &gi) in gx.chunks_mut(inner).zip(g) {
                        for d in chunk {
                            *d += gi / inner as f64;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((grow, yrow), drow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let inner = dot(grow, yrow);
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn channel_sums(
    g: &[f64],
    xhat: &[f64],
    outer: usize,
    ch: usize,
    inner: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xhat[i];
            }
        }
    }
    (sum_g, sum_gx)
}

/// Valid output range for kernel offset `k` (0..3) over an axis of length `len`.
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

fn conv_tap(x: &[f64], out: &mut [f64], h: usize, w: usize, ki: usize, kj: usize, wgt: f64) {
    let (i0, i1) = tap_range(ki, h);
    let (j0, j1) = tap_range(kj, w);
    for i in i0..i1 {
        let src = (i + ki - 1) * w;
        let dst = i * w;
        for j in j0..j1 {
            out[dst + j] += wgt * x[src + j + kj - 1];
        }
    }
}

fn conv_tap_grad_w(x: &[f64], g: &[f64], h: usize, w: usize, ki: usize, kj: usize) -> f64 {
    let (i0, i1) = tap_range(ki, h);
    let (j0, j1) = tap_range(kj, w);
    let mut acc = 0.0;
    for i in i0..i1 {
        let src = (i + ki - 1) * w;
        let dst = i * w;
        for j in j0..j1 {
            acc += g[dst + j] * x[src + j + kj - 1];
        }
    }
    acc
}

fn conv_tap_grad_x(g: &[f64], gx: &mut [f64], h: usize, w: usize, ki: usize, kj: usize, wgt: f64) {
    let (i0, i1) = tap_range(ki, h);
    let (j0, j1) = tap_range(kj, w);
    for i in i0..i1 {
        let src = (i + ki - 1) * w;
        let dst = i * w;
        for j in j0..j1 {
            gx[src + j + kj - 1] += wgt * g[dst + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` with respect to the single parameter leaf.
    fn check(param: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let loss_at = |p: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.param(p.clone());
            let out = build(&mut tape, v);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let v = tape.param(param.clone());
        let out = build(&mut tape, v);
        let analytic = tape.backward(out).tensor(v);
        let h = 1e-6;
        for i in 0..param.len() {
            let mut plus = param.clone();
            plus.data_mut()[i] += h;
            let mut minus = param.clone();
            minus.data_mut()[i] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn ramp(shape: &[usize], start: f64, step: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| start + step * i as f64).collect())
    }

    fn wiggle(shape: &[usize], seed: u32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| libm::sin(1.7 * i as f64 + seed as f64) + 0.3 * libm::cos(0.37 * (i * i) as f64))
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Reduces any tensor to a scalar with distinct per-entry weights.
    fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let flat = tape.reshape(x, &[1, n]);
        let w = tape.constant(wiggle(&[1, n], 11));
        let prod = tape.matmul_bt(flat, w);
        tape.reshape(prod, &[1])
    }

    #[test]
    fn matmul_gradients() {
        let b = wiggle(&[3, 2], 1);
        check(wiggle(&[2, 3], 2), |t, a| {
            let bv = t.constant(b.clone());
            let y = t.matmul(a, bv);
            weighted_sum(t, y)
        });
        let a = wiggle(&[2, 3], 3);
        check(wiggle(&[4, 3], 4), |t, b| {
            let av = t.constant(a.clone());
            let y = t.matmul_bt(av, b);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn batch_norm_gradients() {
        let gamma = ramp(&[3], 0.5, 0.25);
        let beta = ramp(&[3], -0.1, 0.1);
        check(wiggle(&[5, 3], 5), |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let (y, _) = t.batch_norm(x, g, b, 1e-5);
            weighted_sum(t, y)
        });
        let x = wiggle(&[2, 3, 2, 2], 6);
        check(ramp(&[3], 0.5, 0.25), |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::zeros(&[3]));
            let (y, _) = t.batch_norm(xv, g, b, 1e-5);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let w = wiggle(&[3, 2, 3, 3], 7);
        let bias = ramp(&[3], 0.1, 0.1);
        check(wiggle(&[2, 2, 4, 4], 8), |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(bias.clone());
            let y = t.conv3x3(x, wv, bv);
            let y = t.max_pool2(y);
            let y = t.global_avg_pool(y);
            weighted_sum(t, y)
        });
        let x = wiggle(&[2, 2, 4, 4], 9);
        check(w.clone(), |t, wv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(bias.clone());
            let y = t.conv3x3(xv, wv, bv);
            weighted_sum(t, y)
        });
    }

    #[test]
    fn pair_concat_and_cross_entropy_gradients() {
        let right = wiggle(&[3, 2], 10);
        let proj = wiggle(&[4, 1], 12);
        check(wiggle(&[2, 2], 13), |t, left| {
            let r = t.constant(right.clone());
            let pairs = t.pair_concat(left, r);
            let p = t.constant(proj.clone());
            let scores = t.matmul(pairs, p);
            let logits = t.reshape(scores, &[2, 3]);
            t.softmax_cross_entropy(logits, alloc::vec![2, 0])
        });
    }

    #[test]
    fn row_ops_gradients() {
        let other = wiggle(&[2, 3], 14);
        check(wiggle(&[4, 3], 15), |t, x| {
            let o = t.constant(other.clone());
            let picked = t.gather_rows(x, alloc::vec![3, 1, 3]);
            let joined = t.concat_rows(picked, o);
            let soft = t.softmax_rows(joined);
            let r = t.relu(soft);
            let s = t.scale(r, 2.5);
            let m = t.mul_const(s, (0..15).map(|i| (i % 3) as f64).collect());
            weighted_sum(t, m)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(ramp(&[2, 2], 1.0, 1.0));
        let p = tape.param(ramp(&[2, 2], 0.0, 0.5));
        let y = tape.matmul(c, p);
        let s = weighted_sum(&mut tape, y);
        let grads = tape.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn cross_entropy_value_matches_hand_computation() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(&[1, 2], alloc::vec![0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, alloc::vec![1]);
        assert!((tape.value(loss).data()[0] - libm::log(2.0)).abs() < 1e-15);
    }
}
