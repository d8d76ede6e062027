//! Reverse-mode autodiff over a per-step operation tape.
//!
//! A [`DiffGraph`] is built fresh for every training step: leaves are pushed
//! (inputs and parameters), ops record themselves in execution order, and
//! [`DiffGraph::backward`] walks the tape strictly in reverse, accumulating
//! gradients only where a parameter is reachable.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Record {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    AddRowBias { x: NodeId, bias: NodeId },
    Conv3x3 { x: NodeId, w: NodeId, saved: ops::ConvSaved },
    Relu { x: NodeId },
    MaxPool2x2 { x: NodeId, argmax: Vec<u32> },
    GlobalAvgPool { x: NodeId, plane: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, saved: ops::BnSaved },
    LogSoftmax { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<u32>, probs: Vec<f32> },
    KlDiv { student: NodeId, p_s: Vec<f32>, p_t: Vec<f32> },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Record,
}

/// Per-channel batch statistics reported by [`DiffGraph::batchnorm_train`]
/// so the owning layer can update its running buffers.
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Record) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Data leaf; gradients never flow into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Record::Leaf)
    }

    /// Parameter leaf; gradients accumulate for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Record::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ------------------------------------------------------------- forward

    /// a: [m,k] x b: [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![0.0f32; m * n];
        crate::linalg::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, needs, Record::MatMul { a, b }))
    }

    /// x: [B,C] + bias[C], broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tb.dim(0) {
            return Err(Error::DimMismatch {
                op: "add_row_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (b, c) = (tx.dim(0), tx.dim(1));
        let out = ops::add_row_bias_forward(tx.data(), tb.data(), b, c);
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![b, c], out)?, needs, Record::AddRowBias { x, bias }))
    }

    /// x: [B,C,H,W] conv w: [F,C,3,3], stride 1, pad 1 -> [B,F,H,W]
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let xs = tx.shape().to_vec();
        let ws = tw.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[1] != ws[1] {
            return Err(Error::DimMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let f = ws[0];
        let (out, saved) = ops::conv3x3_forward(tx.data(), tw.data(), b, c, h, wd, f);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor::new(vec![b, f, h, wd], out)?,
            needs,
            Record::Conv3x3 { x, w, saved },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape().to_vec(), ops::relu_forward(t.data())).unwrap();
        let needs = self.needs(x);
        self.push(out, needs, Record::Relu { x })
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::BadShape {
                op: "maxpool2x2",
                what: alloc::format!("requires [B,C,H,W] with even H and W, got {s:?}"),
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax) = ops::maxpool2x2_forward(t.data(), b, c, h, w);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, c, h / 2, w / 2], out)?,
            needs,
            Record::MaxPool2x2 { x, argmax },
        ))
    }

    /// [B,C,H,W] -> [B,C]
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::BadShape {
                op: "global_avg_pool",
                what: alloc::format!("requires [B,C,H,W], got {s:?}"),
            });
        }
        let plane = s[2] * s[3];
        let out = ops::gap_forward(t.data(), s[0], s[1], plane);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1]], out)?,
            needs,
            Record::GlobalAvgPool { x, plane },
        ))
    }

    /// Training-mode batchnorm; returns the node and the batch statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, BatchStats)> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::BadShape {
                op: "batchnorm",
                what: alloc::format!("requires [B,C,H,W], got {s:?}"),
            });
        }
        if s[0] < 2 {
            return Err(Error::BadShape {
                op: "batchnorm",
                what: alloc::format!("training mode requires batch >= 2, got {}", s[0]),
            });
        }
        let g = &self.nodes[gamma.0].value;
        if g.numel() != s[1] {
            return Err(Error::DimMismatch {
                op: "batchnorm",
                lhs: s,
                rhs: g.shape().to_vec(),
            });
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let (out, saved) = ops::bn_train_forward(
            t.data(),
            g.data(),
            self.nodes[beta.0].value.data(),
            b,
            c,
            plane,
            eps,
        );
        let stats = BatchStats { mean: saved.batch_mean.clone(), var: saved.batch_var.clone() };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Tensor::new(s, out)?,
            needs,
            Record::BatchNorm { x, gamma, beta, saved },
        );
        Ok((id, stats))
    }

    /// Row-wise log-softmax over [B,C].
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        debug_assert!(t.rank() == 2 && t.dim(1) >= 2, "log_softmax wants [B,C], C >= 2");
        let (b, c) = (t.dim(0), t.dim(1));
        let out = ops::log_softmax_forward(t.data(), b, c);
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, c], out).unwrap(), needs, Record::LogSoftmax { x })
    }

    /// Mean cross-entropy of [B,C] logits against one label per row.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        if t.rank() != 2 || t.dim(0) != labels.len() {
            return Err(Error::BadShape {
                op: "cross_entropy",
                what: alloc::format!("logits {:?} vs {} labels", t.shape(), labels.len()),
            });
        }
        let (b, c) = (t.dim(0), t.dim(1));
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::BadLabel { label: bad as usize, classes: c });
        }
        let (loss, probs) = ops::cross_entropy_forward(t.data(), labels, b, c);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Record::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// KL(p_teacher || p_student), teacher detached.
    pub fn kl_divergence(&mut self, student: NodeId, teacher_logits: &Tensor) -> Result<NodeId> {
        let t = &self.nodes[student.0].value;
        if t.shape() != teacher_logits.shape() || t.rank() != 2 {
            return Err(Error::DimMismatch {
                op: "kl_divergence",
                lhs: t.shape().to_vec(),
                rhs: teacher_logits.shape().to_vec(),
            });
        }
        let (b, c) = (t.dim(0), t.dim(1));
        let (loss, p_s, p_t) = ops::kl_forward(t.data(), teacher_logits.data(), b, c);
        let needs = self.needs(student);
        Ok(self.push(Tensor::scalar(loss), needs, Record::KlDiv { student, p_s, p_t }))
    }

    /// Elementwise sum of two same-shape nodes (used on scalar losses).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::DimMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = ta.data().iter().zip(tb.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Record::Add { a, b }))
    }

    /// Multiply a node by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let t = &self.nodes[x.0].value;
        let data: Vec<f32> = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(out, needs, Record::Scale { x, c })
    }

    // ------------------------------------------------------------ backward

    /// Accumulate d`target`/d`node` for every grad-requiring node, visiting
    /// the tape in exact reverse execution order. `target` must be scalar.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        if self.nodes[target.0].value.numel() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                what: alloc::format!(
                    "target must be scalar, got {:?}",
                    self.nodes[target.0].value.shape()
                ),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[target.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            // Split borrows: the node being visited vs the grad table.
            let (value_shape_len, op) = {
                let n = &self.nodes[i];
                (n.value.numel(), &n.op)
            };
            debug_assert_eq!(gy.len(), value_shape_len);
            match op {
                Record::Leaf => {}
                Record::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let t = &self.nodes[a.0].value;
                        (t.dim(0), t.dim(1))
                    };
                    let n = self.nodes[b.0].value.dim(1);
                    if self.needs(a) {
                        let bd = self.nodes[b.0].value.data().to_vec();
                        let ga = self.grad_buf(a);
                        crate::linalg::gemm_nt(&gy, &bd, ga, m, n, k);
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        let gb = self.grad_buf(b);
                        crate::linalg::gemm_tn(&ad, &gy, gb, m, k, n);
                    }
                }
                Record::AddRowBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let (b, c) = {
                        let t = &self.nodes[x.0].value;
                        (t.dim(0), t.dim(1))
                    };
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        for (g, v) in gx.iter_mut().zip(gy.iter()) {
                            *g += *v;
                        }
                    }
                    if self.needs(bias) {
                        let gb = self.grad_buf(bias);
                        ops::add_row_bias_backward_bias(&gy, b, c, gb);
                    }
                }
                Record::Conv3x3 { x, w, saved } => {
                    let (x, w) = (*x, *w);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let f = self.nodes[w.0].value.dim(0);
                    let saved_ptr: *const ops::ConvSaved = saved;
                    let wdata = self.nodes[w.0].value.data().to_vec();
                    let needs_x = self.needs(x);
                    let needs_w = self.needs(w);
                    // Take the grad buffers one at a time to keep borrows
                    // disjoint; `saved` lives in a node we do not touch.
                    let saved = unsafe { &*saved_ptr };
                    if needs_w {
                        let gw = self.grad_buf(w);
                        ops::conv3x3_backward(
                            &gy, &wdata, saved, xs[0], xs[1], xs[2], xs[3], f, None,
                            Some(gw),
                        );
                    }
                    if needs_x {
                        let gx = self.grad_buf(x);
                        ops::conv3x3_backward(
                            &gy, &wdata, saved, xs[0], xs[1], xs[2], xs[3], f, Some(gx),
                            None,
                        );
                    }
                }
                Record::Relu { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data().to_vec();
                        let gx = self.grad_buf(x);
                        ops::relu_backward(&gy, &xd, gx);
                    }
                }
                Record::MaxPool2x2 { x, argmax } => {
                    let x = *x;
                    let arg = argmax.clone();
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        ops::maxpool2x2_backward(&gy, &arg, gx);
                    }
                }
                Record::GlobalAvgPool { x, plane } => {
                    let (x, plane) = (*x, *plane);
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        ops::gap_backward(&gy, plane, gx);
                    }
                }
                Record::BatchNorm { x, gamma, beta, saved } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gdata = self.nodes[gamma.0].value.data().to_vec();
                    let saved_ptr: *const ops::BnSaved = saved;
                    let saved = unsafe { &*saved_ptr };
                    if self.needs(gamma) {
                        let gg = self.grad_buf(gamma);
                        ops::bn_train_backward(&gy, &gdata, saved, b, c, plane, None, Some(gg), None);
                    }
                    if self.needs(beta) {
                        let gb = self.grad_buf(beta);
                        ops::bn_train_backward(&gy, &gdata, saved, b, c, plane, None, None, Some(gb));
                    }
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        ops::bn_train_backward(&gy, &gdata, saved, b, c, plane, Some(gx), None, None);
                    }
                }
                Record::LogSoftmax { x } => {
                    let x = *x;
                    let (b, c) = {
                        let t = &self.nodes[i].value;
                        (t.dim(0), t.dim(1))
                    };
                    if self.needs(x) {
                        let out = self.nodes[i].value.data().to_vec();
                        let gx = self.grad_buf(x);
                        ops::log_softmax_backward(&gy, &out, b, c, gx);
                    }
                }
                Record::CrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let probs_ptr: *const Vec<f32> = probs;
                    let (b, c) = {
                        let t = &self.nodes[logits.0].value;
                        (t.dim(0), t.dim(1))
                    };
                    if self.needs(logits) {
                        let probs = unsafe { &*probs_ptr };
                        let gl = self.grad_buf(logits);
                        ops::cross_entropy_backward(gy[0], probs, &labels, b, c, gl);
                    }
                }
                Record::KlDiv { student, p_s, p_t } => {
                    let student = *student;
                    let ps_ptr: *const Vec<f32> = p_s;
                    let pt_ptr: *const Vec<f32> = p_t;
                    let b = self.nodes[student.0].value.dim(0);
                    if self.needs(student) {
                        let (p_s, p_t) = unsafe { (&*ps_ptr, &*pt_ptr) };
                        let gs = self.grad_buf(student);
                        ops::kl_backward(gy[0], p_s, p_t, b, gs);
                    }
                }
                Record::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let ga = self.grad_buf(a);
                        for (g, v) in ga.iter_mut().zip(gy.iter()) {
                            *g += *v;
                        }
                    }
                    if self.needs(b) {
                        let gb = self.grad_buf(b);
                        for (g, v) in gb.iter_mut().zip(gy.iter()) {
                            *g += *v;
                        }
                    }
                }
                Record::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.needs(x) {
                        let gx = self.grad_buf(x);
                        for (g, v) in gx.iter_mut().zip(gy.iter()) {
                            *g += *v * c;
                        }
                    }
                }
            }
            // Keep the gradient available for callers (leaf params read it).
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut [f32] {
        let numel = self.nodes[id.0].value.numel();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }
}
