//! Reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Every operation records a node holding its output; `backward` walks the
//! node list in reverse and accumulates gradients. Node inputs always
//! reference earlier nodes, so the graph is acyclic by construction.
//!
//! Determinism contract: each output element is written by exactly one
//! closure call and every reduction runs in a fixed order, so forward values
//! and gradients are bitwise reproducible regardless of thread count.

use crate::error::{Error, Result};
use crate::par;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv1d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    },
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool1d {
        input: NodeId,
        /// Flat input index of the max for every output element.
        argmax: Vec<usize>,
    },
    Reshape {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        /// Row-wise softmax saved from the forward pass.
        probs: Tensor,
    },
    MaskedMse {
        pred: NodeId,
        target: Tensor,
        mask: Vec<bool>,
        masked_count: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only operation tape. Single-owner: one training step records and
/// differentiates on its own tape; distinct tapes may run on distinct threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]. Leaves not reachable
/// from the loss hold zeros of the leaf's shape.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Valid cross-correlation (kernels not flipped):
    /// `out[b,o,i] = bias[o] + Σ_c Σ_j input[b,c,i+j] · kernels[o,c,j]`.
    pub fn conv1d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = conv1d_forward(self.value(input), self.value(kernels), self.value(bias))?;
        Ok(self.push(
            Op::Conv1d {
                input,
                kernels,
                bias,
            },
            value,
        ))
    }

    /// `out = input · weightᵀ + bias` over `[batch, d_in]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = affine_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            value,
        ))
    }

    /// Elementwise `max(0, x)`. Subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu { input }, value))
    }

    /// Non-overlapping max pooling along the last axis of `[batch, ch, len]`.
    /// Trailing elements that do not fill a group are dropped; ties route the
    /// gradient to the earliest index.
    pub fn max_pool1d(&mut self, input: NodeId, width: usize) -> Result<NodeId> {
        let x = self.value(input);
        let (b_n, c_n, len) = x.dims3()?;
        if width < 2 {
            return Err(Error::Shape(format!("pool width must be ≥ 2, got {width}")));
        }
        if len < width {
            return Err(Error::Shape(format!(
                "pool input length {len} shorter than width {width}"
            )));
        }
        let out_len = len / width;
        let xd = x.data();
        let mut out = vec![0.0; b_n * c_n * out_len];
        let mut argmax = vec![0usize; b_n * c_n * out_len];
        for bc in 0..b_n * c_n {
            let in_base = bc * len;
            let out_base = bc * out_len;
            for i in 0..out_len {
                let start = in_base + i * width;
                let mut best = start;
                for j in 1..width {
                    if xd[start + j] > xd[best] {
                        best = start + j;
                    }
                }
                out[out_base + i] = xd[best];
                argmax[out_base + i] = best;
            }
        }
        let value = Tensor::new(vec![b_n, c_n, out_len], out)?;
        Ok(self.push(Op::MaxPool1d { input, argmax }, value))
    }

    /// Row-major reinterpretation with an equal element count.
    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(Op::Reshape { input }, value))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, computed with
    /// max subtraction. Two classes; labels in `{0, 1}`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        let (b_n, classes) = l.dims2()?;
        if classes != 2 {
            return Err(Error::Shape(format!("expected 2 classes, got {classes}")));
        }
        if b_n == 0 {
            return Err(Error::Empty("empty batch for cross-entropy".into()));
        }
        if labels.len() != b_n {
            return Err(Error::Shape(format!(
                "{} labels for batch of {b_n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!("label {bad} out of range")));
        }
        let ld = l.data();
        let mut probs = vec![0.0; b_n * classes];
        let mut total = 0.0;
        for b in 0..b_n {
            let row = &ld[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..classes {
                let e = (row[c] - m).exp();
                probs[b * classes + c] = e;
                z += e;
            }
            for c in 0..classes {
                probs[b * classes + c] /= z;
            }
            total += z.ln() + m - row[labels[b]];
        }
        let probs = Tensor::new(vec![b_n, classes], probs)?;
        let value = Tensor::scalar(total / b_n as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Mean of `(pred − target)²` over masked positions only; unmasked
    /// positions contribute nothing to the value or the gradient.
    pub fn masked_mse(&mut self, pred: NodeId, target: &Tensor, mask: &[bool]) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "pred shape {:?} vs target shape {:?}",
                p.shape(),
                target.shape()
            )));
        }
        if mask.len() != p.len() {
            return Err(Error::Shape(format!(
                "mask length {} vs tensor length {}",
                mask.len(),
                p.len()
            )));
        }
        let masked_count = mask.iter().filter(|&&m| m).count();
        if masked_count == 0 {
            return Err(Error::Empty("mask selects no positions".into()));
        }
        let pd = p.data();
        let td = target.data();
        let mut total = 0.0;
        for i in 0..pd.len() {
            if mask[i] {
                let d = pd[i] - td[i];
                total += d * d;
            }
        }
        let value = Tensor::scalar(total / masked_count as f64);
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
                masked_count,
            },
            value,
        ))
    }

    /// Reverse-topological gradient accumulation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            // A node's gradient is complete once every later node has been
            // processed, so it can be taken out while its inputs accumulate.
            let go = std::mem::replace(&mut grads[idx], Tensor::scalar(0.0));
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv1d {
                    input,
                    kernels,
                    bias,
                } => {
                    let (gi, gk, gb) = conv1d_backward(&go, self.value(*input), self.value(*kernels));
                    add_into(&mut grads[input.0], &gi);
                    add_into(&mut grads[kernels.0], &gk);
                    add_into(&mut grads[bias.0], &gb);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let (gi, gw, gb) = affine_backward(&go, self.value(*input), self.value(*weight));
                    add_into(&mut grads[input.0], &gi);
                    add_into(&mut grads[weight.0], &gw);
                    add_into(&mut grads[bias.0], &gb);
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gi = grads[input.0].data_mut();
                    let god = go.data();
                    for i in 0..gi.len() {
                        if x[i] > 0.0 {
                            gi[i] += god[i];
                        }
                    }
                }
                Op::MaxPool1d { input, argmax, .. } => {
                    let gi = grads[input.0].data_mut();
                    let god = go.data();
                    for (out_i, &in_i) in argmax.iter().enumerate() {
                        gi[in_i] += god[out_i];
                    }
                }
                Op::Reshape { input } => {
                    let gi = grads[input.0].data_mut();
                    let god = go.data();
                    for i in 0..gi.len() {
                        gi[i] += god[i];
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = go.item() / labels.len() as f64;
                    let gl = grads[logits.0].data_mut();
                    let pd = probs.data();
                    let classes = probs.shape()[1];
                    for b in 0..labels.len() {
                        for c in 0..classes {
                            let ind = if labels[b] == c { 1.0 } else { 0.0 };
                            gl[b * classes + c] += scale * (pd[b * classes + c] - ind);
                        }
                    }
                }
                Op::MaskedMse {
                    pred,
                    target,
                    mask,
                    masked_count,
                } => {
                    let scale = 2.0 * go.item() / *masked_count as f64;
                    let pv = self.value(*pred).data();
                    let td = target.data();
                    let gp = grads[pred.0].data_mut();
                    for i in 0..gp.len() {
                        if mask[i] {
                            gp[i] += scale * (pv[i] - td[i]);
                        }
                    }
                }
            }
            grads[idx] = go;
        }
        Ok(Gradients { grads })
    }
}

// ── Kernels ──────────────────────────────────────────────────────────────────

fn add_into(acc: &mut Tensor, delta: &Tensor) {
    let a = acc.data_mut();
    let d = delta.data();
    for i in 0..a.len() {
        a[i] += d[i];
    }
}

/// Dot product with four independent accumulators. The grouping is fixed,
/// so results are deterministic; the independence lets the compiler
/// vectorize the reduction.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let quads = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..quads {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in quads * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s2) + (s1 + s3) + tail
}

fn conv1d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b_n, c_in, len) = input.dims3()?;
    let (c_out, kc_in, k) = kernels.dims3()?;
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d: input has {c_in} channels, kernels expect {kc_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv1d: bias shape {:?}, expected [{c_out}]",
            bias.shape()
        )));
    }
    if k > len {
        return Err(Error::Shape(format!(
            "conv1d: kernel size {k} exceeds input length {len}"
        )));
    }
    let out_len = len - k + 1;
    let (in_d, ker, bs) = (input.data(), kernels.data(), bias.data());
    let mut out = Tensor::zeros(vec![b_n, c_out, out_len]);
    par::for_each_chunk_mut(out.data_mut(), out_len, |chunk_idx, chunk| {
        let b = chunk_idx / c_out;
        let o = chunk_idx % c_out;
        let in_base = b * c_in * len;
        let ker_base = o * c_in * k;
        chunk.fill(bs[o]);
        // one vectorizable axpy pass per kernel tap
        for c in 0..c_in {
            let in_row = &in_d[in_base + c * len..in_base + (c + 1) * len];
            let k_row = &ker[ker_base + c * k..ker_base + (c + 1) * k];
            for (j, &w) in k_row.iter().enumerate() {
                for (slot, x) in chunk.iter_mut().zip(&in_row[j..j + out_len]) {
                    *slot += w * x;
                }
            }
        }
    });
    Ok(out)
}

fn conv1d_backward(go: &Tensor, input: &Tensor, kernels: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b_n, c_in, len) = input.dims3().expect("checked at record time");
    let (c_out, _, k) = kernels.dims3().expect("checked at record time");
    let out_len = len - k + 1;
    let (god, in_d, ker) = (go.data(), input.data(), kernels.data());
    let mut grad_input = Tensor::zeros(vec![b_n, c_in, len]);
    let mut grad_kernels = Tensor::zeros(vec![c_out, c_in, k]);
    let mut grad_bias = Tensor::zeros(vec![c_out]);

    // Scatter-add form, one axpy pass per kernel tap:
    // grad_in[b,c,i+j] += go[b,o,i] · ker[o,c,j].
    par::for_each_chunk_mut(grad_input.data_mut(), c_in * len, |b, chunk| {
        for o in 0..c_out {
            let go_row = &god[b * c_out * out_len + o * out_len..][..out_len];
            for c in 0..c_in {
                let k_row = &ker[o * c_in * k + c * k..][..k];
                let gin_row = &mut chunk[c * len..(c + 1) * len];
                for (j, &w) in k_row.iter().enumerate() {
                    for (slot, g) in gin_row[j..j + out_len].iter_mut().zip(go_row) {
                        *slot += w * g;
                    }
                }
            }
        }
    });

    par::for_each_chunk_mut(grad_kernels.data_mut(), c_in * k, |o, chunk| {
        for b in 0..b_n {
            let go_row = &god[b * c_out * out_len + o * out_len..][..out_len];
            for c in 0..c_in {
                let in_row = &in_d[b * c_in * len + c * len..][..len];
                for (j, slot) in chunk[c * k..(c + 1) * k].iter_mut().enumerate() {
                    *slot += dot4(go_row, &in_row[j..j + out_len]);
                }
            }
        }
    });

    let gb = grad_bias.data_mut();
    for o in 0..c_out {
        let mut acc = gb[o];
        for b in 0..b_n {
            let go_base = b * c_out * out_len + o * out_len;
            for i in 0..out_len {
                acc += god[go_base + i];
            }
        }
        gb[o] = acc;
    }
    (grad_input, grad_kernels, grad_bias)
}

fn affine_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b_n, d_in) = input.dims2()?;
    let (d_out, wd_in) = weight.dims2()?;
    if wd_in != d_in {
        return Err(Error::Shape(format!(
            "affine: input dim {d_in}, weight expects {wd_in}"
        )));
    }
    if bias.shape() != [d_out] {
        return Err(Error::Shape(format!(
            "affine: bias shape {:?}, expected [{d_out}]",
            bias.shape()
        )));
    }
    let (in_d, w, bs) = (input.data(), weight.data(), bias.data());
    let mut out = Tensor::zeros(vec![b_n, d_out]);
    par::for_each_chunk_mut(out.data_mut(), d_out, |b, row| {
        let in_row = &in_d[b * d_in..(b + 1) * d_in];
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = bs[o] + dot4(in_row, &w[o * d_in..(o + 1) * d_in]);
        }
    });
    Ok(out)
}

fn affine_backward(go: &Tensor, input: &Tensor, weight: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b_n, d_in) = input.dims2().expect("checked at record time");
    let (d_out, _) = weight.dims2().expect("checked at record time");
    let (god, in_d, w) = (go.data(), input.data(), weight.data());
    let mut grad_input = Tensor::zeros(vec![b_n, d_in]);
    let mut grad_weight = Tensor::zeros(vec![d_out, d_in]);
    let mut grad_bias = Tensor::zeros(vec![d_out]);

    par::for_each_chunk_mut(grad_input.data_mut(), d_in, |b, row| {
        for o in 0..d_out {
            let g = god[b * d_out + o];
            let w_row = &w[o * d_in..(o + 1) * d_in];
            for (slot, wv) in row.iter_mut().zip(w_row) {
                *slot += g * wv;
            }
        }
    });

    par::for_each_chunk_mut(grad_weight.data_mut(), d_in, |o, row| {
        for b in 0..b_n {
            let g = god[b * d_out + o];
            let in_row = &in_d[b * d_in..(b + 1) * d_in];
            for (slot, x) in row.iter_mut().zip(in_row) {
                *slot += g * x;
            }
        }
    });

    let gb = grad_bias.data_mut();
    for o in 0..d_out {
        let mut acc = gb[o];
        for b in 0..b_n {
            acc += god[b * d_out + o];
        }
        gb[o] = acc;
    }
    (grad_input, grad_weight, grad_bias)
}
