//! Reverse-mode autodiff on an append-only operation record. Nodes are
//! created in topological order by construction; one backward sweep visits
//! each node exactly once, in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::Tensor;

/// Probabilities are clamped here before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// The primitive op set. Shape laws follow the usual NCHW conventions;
/// convolution kernels are OIHW, transposed-convolution kernels IOHW.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// x:(B,I) · w:(I,O) + b:(O) -> (B,O)
    Linear,
    /// x:(B,Ci,H,W), w:(Co,Ci,kh,kw), b:(Co)
    Conv2d { stride: usize, padding: usize },
    /// x:(B,Ci,H,W), w:(Ci,Co,kh,kw), b:(Co)
    ConvTranspose2d { stride: usize, padding: usize },
    /// Batch-statistics normalization; x:(B,C,H,W), gamma:(C), beta:(C)
    BatchNorm2d { eps: f64 },
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sigmoid,
    /// Row-wise over the trailing extent.
    Softmax,
    Log,
    /// Elementwise, identical shapes.
    Add,
    /// Elementwise, identical shapes.
    Mul,
    /// Full reduction to a scalar.
    Mean,
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Linear => "linear",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::ConvTranspose2d { .. } => "conv2d_transpose",
            Primitive::BatchNorm2d { .. } => "batchnorm2d",
            Primitive::LeakyRelu { .. } => "leaky_relu",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Mean => "mean",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Prim(Primitive),
    /// Normalization with fixed (running) statistics;
    /// inputs x, gamma, beta, mean, var.
    BatchNormFixed { eps: f64 },
    /// factor * x
    Scale { factor: f64 },
    /// Mean over the batch of -log softmax(x)[label].
    CrossEntropyMean { labels: Vec<usize> },
    /// Self-training loss against own argmax where confidence exceeds tau;
    /// divided by the full batch size.
    PseudoLabelMean { tau: f64 },
    /// KL(meanP || meanQ) between batch-mean softmax distributions.
    KlBatchMean,
    /// mean(-ln clamp(x))
    NegLogMean,
    /// mean(-ln clamp(1 - x))
    NegLogOneMinusMean,
    /// mean(-ln clamp(1 - softmax(x)[class])); pushes mass away from `class`.
    AvoidClassMean { class: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of tensor operations holding values and gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: impl core::fmt::Display, got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: format!("{expected}"),
        got: got.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Leaf that accumulates gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Leaf with explicit gradient tracking choice.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, if any backward pass has run over this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.push(op, inputs, value, requires_grad)
    }

    /// Apply one primitive. Validates input shapes and appends the node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.forward_primitive(&prim, inputs)?;
        Ok(self.push_derived(Op::Prim(prim), inputs.to_vec(), value))
    }

    /// factor * x, with a compile-time constant factor.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.nodes[x.0].value.data().iter().map(|a| factor * a).collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), v).unwrap();
        self.push_derived(Op::Scale { factor }, vec![x], value)
    }

    /// Stable mean cross entropy of logits (B,C) against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 2 {
            return Err(shape_err("cross_entropy", "logits of rank 2", t.shape()));
        }
        let (rows, cols) = t.as_rows();
        if labels.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} labels"),
                &[labels.len()],
            ));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: cols,
                });
            }
        }
        let lse = kernels::logsumexp_rows(t.data(), cols);
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            total += lse[r] - t.data()[r * cols + l];
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push_derived(
            Op::CrossEntropyMean {
                labels: labels.to_vec(),
            },
            vec![logits],
            value,
        ))
    }

    /// Pseudo-label loss on generated-sample logits (B,C). Returns the loss
    /// node and the fraction of samples whose confidence strictly exceeds
    /// tau. The pseudo-label (row argmax) carries no gradient.
    pub fn pseudo_label_mean(&mut self, logits: NodeId, tau: f64) -> Result<(NodeId, f64)> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 2 {
            return Err(shape_err("pseudo_label", "logits of rank 2", t.shape()));
        }
        let (rows, cols) = t.as_rows();
        let p = kernels::softmax_rows(t.data(), cols);
        let lse = kernels::logsumexp_rows(t.data(), cols);
        let mut total = 0.0;
        let mut accepted = 0usize;
        for r in 0..rows {
            let row = &p[r * cols..(r + 1) * cols];
            let (label, maxp) = argmax_with_value(row);
            if maxp > tau {
                accepted += 1;
                total += lse[r] - t.data()[r * cols + label];
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        let id = self.push_derived(Op::PseudoLabelMean { tau }, vec![logits], value);
        Ok((id, accepted as f64 / rows as f64))
    }

    /// KL divergence between the batch-mean softmax distributions of two
    /// logit tensors: KL(mean softmax(p_logits) || mean softmax(q_logits)).
    pub fn kl_batch_mean(&mut self, p_logits: NodeId, q_logits: NodeId) -> Result<NodeId> {
        let (tp, tq) = (&self.nodes[p_logits.0].value, &self.nodes[q_logits.0].value);
        if tp.shape().len() != 2 || tq.shape().len() != 2 || tp.shape()[1] != tq.shape()[1] {
            return Err(shape_err(
                "kl_batch_mean",
                format!("rank-2 logits with matching class count, lhs {:?}", tp.shape()),
                tq.shape(),
            ));
        }
        let p = batch_mean_softmax(tp);
        let q = batch_mean_softmax(tq);
        let mut total = 0.0;
        for (pc, qc) in p.iter().zip(&q) {
            let pc = pc.max(PROB_CLAMP);
            let qc = qc.max(PROB_CLAMP);
            total += pc * math::ln(pc / qc);
        }
        let value = Tensor::scalar(total);
        Ok(self.push_derived(Op::KlBatchMean, vec![p_logits, q_logits], value))
    }

    /// mean(-ln x) with clamping; x is typically a probability vector.
    pub fn neg_log_mean(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let n = t.numel() as f64;
        let total: f64 = t.data().iter().map(|&v| -math::ln(v.max(PROB_CLAMP))).sum();
        let value = Tensor::scalar(total / n);
        self.push_derived(Op::NegLogMean, vec![x], value)
    }

    /// mean(-ln (1 - x)) with clamping.
    pub fn neg_log_one_minus_mean(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let n = t.numel() as f64;
        let total: f64 = t
            .data()
            .iter()
            .map(|&v| -math::ln((1.0 - v).max(PROB_CLAMP)))
            .sum();
        let value = Tensor::scalar(total / n);
        self.push_derived(Op::NegLogOneMinusMean, vec![x], value)
    }

    /// mean(-ln(1 - softmax(x)[class])): trains rows of x away from `class`.
    pub fn avoid_class_mean(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 2 || class >= t.shape()[1] {
            return Err(shape_err(
                "avoid_class",
                format!("rank-2 logits with more than {class} columns"),
                t.shape(),
            ));
        }
        let (rows, cols) = t.as_rows();
        let p = kernels::softmax_rows(t.data(), cols);
        let mut total = 0.0;
        for r in 0..rows {
            total += -math::ln((1.0 - p[r * cols + class]).max(PROB_CLAMP));
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push_derived(Op::AvoidClassMean { class }, vec![logits], value))
    }

    /// Normalization with fixed statistics (evaluation-mode batchnorm).
    /// Inputs: x (B,C,H,W), gamma (C), beta (C), mean (C), var (C).
    pub fn batchnorm_fixed(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let value = {
            let xt = &self.nodes[x.0].value;
            let c = check_bn_shapes(
                "batchnorm_fixed",
                xt,
                &self.nodes[gamma.0].value,
                &self.nodes[beta.0].value,
            )?;
            let (m, v) = (&self.nodes[mean.0].value, &self.nodes[var.0].value);
            if m.shape() != [c] || v.shape() != [c] {
                return Err(shape_err("batchnorm_fixed", format!("stats of shape [{c}]"), m.shape()));
            }
            bn_affine_forward(
                xt,
                self.nodes[gamma.0].value.data(),
                self.nodes[beta.0].value.data(),
                m.data(),
                v.data(),
                eps,
            )
        };
        Ok(self.push_derived(
            Op::BatchNormFixed { eps },
            vec![x, gamma, beta, mean, var],
            value,
        ))
    }

    /// Run reverse-mode accumulation from a scalar loss. Gradients add onto
    /// whatever previous backward passes left in place; every gradient-
    /// tracked node ends up with a gradient buffer (zeros if unreachable).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.nodes[loss.0].value.numel(),
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = scratch[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut scratch);
            scratch[idx] = Some(upstream);
        }
        for (node, s) in self.nodes.iter_mut().zip(scratch) {
            if !node.requires_grad {
                continue;
            }
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
            if let Some(s) = s {
                for (g, v) in grad.iter_mut().zip(s) {
                    *g += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let input_grads = self.input_grads(node, dy);
        for (id, grad) in node.inputs.iter().zip(input_grads) {
            let Some(grad) = grad else { continue };
            if !self.nodes[id.0].requires_grad {
                continue;
            }
            match &mut scratch[id.0] {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
                slot => *slot = Some(grad),
            }
        }
    }

    fn input_value(&self, node: &Node, k: usize) -> &Tensor {
        &self.nodes[node.inputs[k].0].value
    }

    /// Per-input gradient contributions for one node; `None` entries mean
    /// the op contributes no gradient to that input.
    fn input_grads(&self, node: &Node, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Scale { factor } => vec![Some(dy.iter().map(|g| factor * g).collect())],
            Op::Prim(p) => self.primitive_grads(p, node, dy),
            Op::BatchNormFixed { eps } => self.bn_fixed_grads(node, dy, *eps),
            Op::CrossEntropyMean { labels } => {
                let x = self.input_value(node, 0);
                let (rows, cols) = x.as_rows();
                let p = kernels::softmax_rows(x.data(), cols);
                let scale = dy[0] / rows as f64;
                let mut dx = p;
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * cols + l] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                vec![Some(dx)]
            }
            Op::PseudoLabelMean { tau } => {
                let x = self.input_value(node, 0);
                let (rows, cols) = x.as_rows();
                let p = kernels::softmax_rows(x.data(), cols);
                let scale = dy[0] / rows as f64;
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    let row = &p[r * cols..(r + 1) * cols];
                    let (label, maxp) = argmax_with_value(row);
                    if maxp > *tau {
                        for k in 0..cols {
                            let delta = if k == label { 1.0 } else { 0.0 };
                            dx[r * cols + k] = (row[k] - delta) * scale;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::KlBatchMean => {
                let (tp, tq) = (self.input_value(node, 0), self.input_value(node, 1));
                let p = batch_mean_softmax(tp);
                let q = batch_mean_softmax(tq);
                // dL/dP_c and dL/dQ_c on the clamped objective.
                let mut gp = vec![0.0; p.len()];
                let mut gq = vec![0.0; q.len()];
                for c in 0..p.len() {
                    let pc = p[c].max(PROB_CLAMP);
                    let qc = q[c].max(PROB_CLAMP);
                    if p[c] > PROB_CLAMP {
                        gp[c] = math::ln(pc / qc) + 1.0;
                    }
                    if q[c] > PROB_CLAMP {
                        gq[c] = -pc / qc;
                    }
                }
                vec![
                    Some(mean_softmax_vjp(tp, &gp, dy[0])),
                    Some(mean_softmax_vjp(tq, &gq, dy[0])),
                ]
            }
            Op::NegLogMean => {
                let x = self.input_value(node, 0);
                let scale = dy[0] / x.numel() as f64;
                let dx = x
                    .data()
                    .iter()
                    .map(|&v| if v > PROB_CLAMP { -scale / v } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            Op::NegLogOneMinusMean => {
                let x = self.input_value(node, 0);
                let scale = dy[0] / x.numel() as f64;
                let dx = x
                    .data()
                    .iter()
                    .map(|&v| {
                        if (1.0 - v) > PROB_CLAMP {
                            scale / (1.0 - v)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(dx)]
            }
            Op::AvoidClassMean { class } => {
                let x = self.input_value(node, 0);
                let (rows, cols) = x.as_rows();
                let p = kernels::softmax_rows(x.data(), cols);
                let scale = dy[0] / rows as f64;
                let mut dx = vec![0.0; x.numel()];
                for r in 0..rows {
                    let row = &p[r * cols..(r + 1) * cols];
                    let pc = row[*class];
                    if (1.0 - pc) <= PROB_CLAMP {
                        continue;
                    }
                    // d/dx of -ln(1-p_class) via the softmax Jacobian.
                    let coef = scale * pc / (1.0 - pc);
                    for k in 0..cols {
                        let delta = if k == *class { 1.0 } else { 0.0 };
                        dx[r * cols + k] = coef * (delta - row[k]);
                    }
                }
                vec![Some(dx)]
            }
        }
    }

    fn primitive_grads(&self, prim: &Primitive, node: &Node, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        match prim {
            Primitive::Linear => {
                let (x, w) = (self.input_value(node, 0), self.input_value(node, 1));
                let (b_rows, in_f) = x.as_rows();
                let out_f = w.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                let mut dw = vec![0.0; w.numel()];
                let mut db = vec![0.0; out_f];
                for r in 0..b_rows {
                    for o in 0..out_f {
                        let g = dy[r * out_f + o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for i in 0..in_f {
                            dx[r * in_f + i] += g * w.data()[i * out_f + o];
                            dw[i * out_f + o] += g * x.data()[r * in_f + i];
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            }
            Primitive::Conv2d { stride, padding } => {
                let (x, w) = (self.input_value(node, 0), self.input_value(node, 1));
                let (b, ci, h, wd) = nchw(x.shape());
                let (co, _, kh, kw) = nchw(w.shape());
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let (dx, dw, db) = kernels::conv2d_backward(
                    x.data(),
                    w.data(),
                    dy,
                    b,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                vec![Some(dx), Some(dw), Some(db)]
            }
            Primitive::ConvTranspose2d { stride, padding } => {
                let (x, w) = (self.input_value(node, 0), self.input_value(node, 1));
                let (b, ci, h, wd) = nchw(x.shape());
                let (_, co, kh, kw) = nchw(w.shape());
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let (dx, dw, db) = kernels::convt2d_backward(
                    x.data(),
                    w.data(),
                    dy,
                    b,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                vec![Some(dx), Some(dw), Some(db)]
            }
            Primitive::BatchNorm2d { eps } => {
                let (x, gamma) = (self.input_value(node, 0), self.input_value(node, 1));
                let (b, c, h, wd) = nchw(x.shape());
                let hw = h * wd;
                let n = (b * hw) as f64;
                let (mean, var) = kernels::channel_stats(x.data(), b, c, hw);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                let istd: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for k in 0..hw {
                            let xhat = (x.data()[base + k] - mean[ch]) * istd[ch];
                            let g = dy[base + k];
                            dbeta[ch] += g;
                            dgamma[ch] += g * xhat;
                            let dxh = g * gamma.data()[ch];
                            sum_dxhat[ch] += dxh;
                            sum_dxhat_xhat[ch] += dxh * xhat;
                        }
                    }
                }
                let mut dx = vec![0.0; x.numel()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for k in 0..hw {
                            let xhat = (x.data()[base + k] - mean[ch]) * istd[ch];
                            let dxh = dy[base + k] * gamma.data()[ch];
                            dx[base + k] = istd[ch] / n
                                * (n * dxh - sum_dxhat[ch] - xhat * sum_dxhat_xhat[ch]);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Primitive::LeakyRelu { slope } => {
                let x = self.input_value(node, 0);
                let dx = x
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
                    .collect();
                vec![Some(dx)]
            }
            Primitive::Relu => {
                let x = self.input_value(node, 0);
                let dx = x
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            Primitive::Tanh => {
                let y = &node.value;
                let dx = y.data().iter().zip(dy).map(|(&v, &g)| g * (1.0 - v * v)).collect();
                vec![Some(dx)]
            }
            Primitive::Sigmoid => {
                let y = &node.value;
                let dx = y
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| g * v * (1.0 - v))
                    .collect();
                vec![Some(dx)]
            }
            Primitive::Softmax => {
                let y = &node.value;
                let (rows, cols) = y.as_rows();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &dy[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        dx[r * cols + k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Primitive::Log => {
                let x = self.input_value(node, 0);
                let dx = x.data().iter().zip(dy).map(|(&v, &g)| g / v).collect();
                vec![Some(dx)]
            }
            Primitive::Add => vec![Some(dy.to_vec()), Some(dy.to_vec())],
            Primitive::Mul => {
                let (a, b) = (self.input_value(node, 0), self.input_value(node, 1));
                let da = b.data().iter().zip(dy).map(|(&v, &g)| v * g).collect();
                let db = a.data().iter().zip(dy).map(|(&v, &g)| v * g).collect();
                vec![Some(da), Some(db)]
            }
            Primitive::Mean => {
                let x = self.input_value(node, 0);
                let g = dy[0] / x.numel() as f64;
                vec![Some(vec![g; x.numel()])]
            }
            Primitive::Reshape { .. } => vec![Some(dy.to_vec())],
            Primitive::Concat { axis } => {
                let shapes: Vec<&[usize]> = node
                    .inputs
                    .iter()
                    .map(|id| self.nodes[id.0].value.shape())
                    .collect();
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut grads = Vec::with_capacity(shapes.len());
                let mut offset = 0usize;
                for shape in shapes {
                    let ext = shape[*axis];
                    let mut dxi = vec![0.0; ext * outer * inner];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * ext * inner;
                        dxi[dst..dst + ext * inner]
                            .copy_from_slice(&dy[src..src + ext * inner]);
                    }
                    offset += ext;
                    grads.push(Some(dxi));
                }
                grads
            }
        }
    }

    fn bn_fixed_grads(&self, node: &Node, dy: &[f64], eps: f64) -> Vec<Option<Vec<f64>>> {
        let x = self.input_value(node, 0);
        let gamma = self.input_value(node, 1);
        let mean = self.input_value(node, 3);
        let var = self.input_value(node, 4);
        let (b, c, h, wd) = nchw(x.shape());
        let hw = h * wd;
        let istd: Vec<f64> = var.data().iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
        let mut dx = vec![0.0; x.numel()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for k in 0..hw {
                    let g = dy[base + k];
                    let xhat = (x.data()[base + k] - mean.data()[ch]) * istd[ch];
                    dx[base + k] = g * gamma.data()[ch] * istd[ch];
                    dgamma[ch] += g * xhat;
                    dbeta[ch] += g;
                }
            }
        }
        // Fixed statistics are constants.
        vec![Some(dx), Some(dgamma), Some(dbeta), None, None]
    }

    fn forward_primitive(&self, prim: &Primitive, inputs: &[NodeId]) -> Result<Tensor> {
        let arity = match prim {
            Primitive::Linear
            | Primitive::Conv2d { .. }
            | Primitive::ConvTranspose2d { .. }
            | Primitive::BatchNorm2d { .. } => 3,
            Primitive::Add | Primitive::Mul => 2,
            Primitive::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Invalid(format!(
                "{}: expected {arity} inputs, got {}",
                prim.name(),
                inputs.len()
            )));
        }
        let val = |k: usize| &self.nodes[inputs[k].0].value;
        match prim {
            Primitive::Linear => {
                let (x, w, b) = (val(0), val(1), val(2));
                if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
                    return Err(shape_err(
                        "linear",
                        format!("x (B,I) with w (I,O); x is {:?}", x.shape()),
                        w.shape(),
                    ));
                }
                let (rows, in_f) = x.as_rows();
                let out_f = w.shape()[1];
                if b.shape() != [out_f] {
                    return Err(shape_err("linear", format!("bias of shape [{out_f}]"), b.shape()));
                }
                let mut y = vec![0.0; rows * out_f];
                for r in 0..rows {
                    let xrow = &x.data()[r * in_f..(r + 1) * in_f];
                    let yrow = &mut y[r * out_f..(r + 1) * out_f];
                    yrow.copy_from_slice(b.data());
                    for (i, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w.data()[i * out_f..(i + 1) * out_f];
                        for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                            *yv += xv * wv;
                        }
                    }
                }
                Tensor::new(vec![rows, out_f], y)
            }
            Primitive::Conv2d { stride, padding } => {
                let (x, w, bias) = (val(0), val(1), val(2));
                if x.shape().len() != 4 || w.shape().len() != 4 || x.shape()[1] != w.shape()[1] {
                    return Err(shape_err(
                        "conv2d",
                        format!("x NCHW with kernel OIHW sharing C; x is {:?}", x.shape()),
                        w.shape(),
                    ));
                }
                let (b, ci, h, wd) = nchw(x.shape());
                let (co, _, kh, kw) = nchw(w.shape());
                if bias.shape() != [co] {
                    return Err(shape_err("conv2d", format!("bias of shape [{co}]"), bias.shape()));
                }
                let oh = kernels::conv_out_extent(h, kh, *stride, *padding);
                let ow = kernels::conv_out_extent(wd, kw, *stride, *padding);
                let (Some(oh), Some(ow)) = (oh, ow) else {
                    return Err(shape_err(
                        "conv2d",
                        format!("input at least {kh}x{kw} after padding {padding}"),
                        x.shape(),
                    ));
                };
                let y = kernels::conv2d_forward(
                    x.data(),
                    w.data(),
                    bias.data(),
                    b,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                Tensor::new(vec![b, co, oh, ow], y)
            }
            Primitive::ConvTranspose2d { stride, padding } => {
                let (x, w, bias) = (val(0), val(1), val(2));
                if x.shape().len() != 4 || w.shape().len() != 4 || x.shape()[1] != w.shape()[0] {
                    return Err(shape_err(
                        "conv2d_transpose",
                        format!("x NCHW with kernel IOHW sharing C; x is {:?}", x.shape()),
                        w.shape(),
                    ));
                }
                let (b, ci, h, wd) = nchw(x.shape());
                let (_, co, kh, kw) = nchw(w.shape());
                if bias.shape() != [co] {
                    return Err(shape_err(
                        "conv2d_transpose",
                        format!("bias of shape [{co}]"),
                        bias.shape(),
                    ));
                }
                let oh = kernels::convt_out_extent(h, kh, *stride, *padding);
                let ow = kernels::convt_out_extent(wd, kw, *stride, *padding);
                let (Some(oh), Some(ow)) = (oh, ow) else {
                    return Err(shape_err(
                        "conv2d_transpose",
                        format!("output extent positive for kernel {kh}x{kw} padding {padding}"),
                        x.shape(),
                    ));
                };
                let y = kernels::convt2d_forward(
                    x.data(),
                    w.data(),
                    bias.data(),
                    b,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                Tensor::new(vec![b, co, oh, ow], y)
            }
            Primitive::BatchNorm2d { eps } => {
                let (x, gamma, beta) = (val(0), val(1), val(2));
                check_bn_shapes("batchnorm2d", x, gamma, beta)?;
                let (b, c, h, wd) = nchw(x.shape());
                let hw = h * wd;
                let (mean, var) = kernels::channel_stats(x.data(), b, c, hw);
                let mut y = vec![0.0; x.numel()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let istd = 1.0 / math::sqrt(var[ch] + eps);
                        let (g, be) = (gamma.data()[ch], beta.data()[ch]);
                        for k in 0..hw {
                            y[base + k] = g * (x.data()[base + k] - mean[ch]) * istd + be;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), y)
            }
            Primitive::LeakyRelu { slope } => {
                let x = val(0);
                let y = x
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { slope * v })
                    .collect();
                Tensor::new(x.shape().to_vec(), y)
            }
            Primitive::Relu => {
                let x = val(0);
                let y = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), y)
            }
            Primitive::Tanh => {
                let x = val(0);
                let y = x.data().iter().map(|&v| math::tanh(v)).collect();
                Tensor::new(x.shape().to_vec(), y)
            }
            Primitive::Sigmoid => {
                let x = val(0);
                let y = x.data().iter().map(|&v| math::sigmoid(v)).collect();
                Tensor::new(x.shape().to_vec(), y)
            }
            Primitive::Softmax => {
                let x = val(0);
                let (_, cols) = x.as_rows();
                Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), cols))
            }
            Primitive::Log => {
                let x = val(0);
                let y = x.data().iter().map(|&v| math::ln(v)).collect();
                Tensor::new(x.shape().to_vec(), y)
            }
            Primitive::Add | Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(shape_err(
                        prim.name(),
                        format!("matching shapes, lhs {:?}", a.shape()),
                        b.shape(),
                    ));
                }
                let y = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &z)| match prim {
                        Primitive::Add => x + z,
                        _ => x * z,
                    })
                    .collect();
                Tensor::new(a.shape().to_vec(), y)
            }
            Primitive::Mean => {
                let x = val(0);
                let m: f64 = x.data().iter().sum::<f64>() / x.numel() as f64;
                Ok(Tensor::scalar(m))
            }
            Primitive::Reshape { shape } => {
                let x = val(0);
                let numel: usize = shape.iter().product();
                if numel != x.numel() {
                    return Err(shape_err(
                        "reshape",
                        format!("shape with {} elements", x.numel()),
                        shape,
                    ));
                }
                Tensor::new(shape.clone(), x.data().to_vec())
            }
            Primitive::Concat { axis } => {
                let first = val(0);
                let rank = first.shape().len();
                if *axis >= rank {
                    return Err(shape_err("concat", format!("axis < {rank}"), &[*axis]));
                }
                let mut axis_total = 0usize;
                for k in 0..inputs.len() {
                    let s = val(k).shape();
                    let compatible = s.len() == rank
                        && s.iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(d, (a, b))| d == *axis || a == b);
                    if !compatible {
                        return Err(shape_err(
                            "concat",
                            format!("shapes matching {:?} except axis {axis}", first.shape()),
                            s,
                        ));
                    }
                    axis_total += s[*axis];
                }
                let mut out_shape = first.shape().to_vec();
                out_shape[*axis] = axis_total;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let mut y = vec![0.0; outer * axis_total * inner];
                let mut offset = 0usize;
                for k in 0..inputs.len() {
                    let t = val(k);
                    let ext = t.shape()[*axis];
                    for o in 0..outer {
                        let src = o * ext * inner;
                        let dst = (o * axis_total + offset) * inner;
                        y[dst..dst + ext * inner]
                            .copy_from_slice(&t.data()[src..src + ext * inner]);
                    }
                    offset += ext;
                }
                Tensor::new(out_shape, y)
            }
        }
    }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn check_bn_shapes(op: &'static str, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    if x.shape().len() != 4 {
        return Err(shape_err(op, "rank-4 NCHW input", x.shape()));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(op, format!("gamma/beta of shape [{c}]"), gamma.shape()));
    }
    Ok(c)
}

fn bn_affine_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor {
    let (b, c, h, wd) = nchw(x.shape());
    let hw = h * wd;
    let mut y = vec![0.0; x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let istd = 1.0 / math::sqrt(var[ch] + eps);
            for k in 0..hw {
                y[base + k] = gamma[ch] * (x.data()[base + k] - mean[ch]) * istd + beta[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).unwrap()
}

fn argmax_with_value(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    (best, row[best])
}

/// Column means of the row-softmax of a (B,C) tensor.
fn batch_mean_softmax(t: &Tensor) -> Vec<f64> {
    let (rows, cols) = t.as_rows();
    let p = kernels::softmax_rows(t.data(), cols);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += p[r * cols + c];
        }
    }
    for v in &mut out {
        *v /= rows as f64;
    }
    out
}

/// VJP through `mean over rows of softmax` given the gradient `g` on the
/// mean distribution, scaled by the upstream scalar gradient.
fn mean_softmax_vjp(t: &Tensor, g: &[f64], upstream: f64) -> Vec<f64> {
    let (rows, cols) = t.as_rows();
    let p = kernels::softmax_rows(t.data(), cols);
    let mut dx = vec![0.0; t.numel()];
    let scale = upstream / rows as f64;
    for r in 0..rows {
        let row = &p[r * cols..(r + 1) * cols];
        let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..cols {
            dx[r * cols + k] = scale * row[k] * (g[k] - dot);
        }
    }
    dx
}
