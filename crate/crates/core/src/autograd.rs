//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation evaluates eagerly, appends a node holding its output and
//! whatever the backward pass needs, and returns a [`NodeId`]. Nodes only
//! ever reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Inputs are ordinary leaves, so gradients with respect to data are as
//! cheap as gradients with respect to parameters.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Affine,
    Relu,
    Conv2d,
    MaxPool2,
    Concat,
    SoftmaxCrossEntropy,
    Sum,
    Dot,
    Scale,
    Add,
    GradientReversal,
    Reshape,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Affine => "affine",
            OpKind::Relu => "relu",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Concat => "concat_features",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Dot => "dot",
            OpKind::Scale => "scale",
            OpKind::Add => "add",
            OpKind::GradientReversal => "gradient_reversal",
            OpKind::Reshape => "reshape",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Conv2d { x: NodeId, k: NodeId, b: NodeId, stride: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Concat { a: NodeId, b: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Sum(NodeId),
    Dot { x: NodeId, weights: Tensor },
    Scale { x: NodeId, factor: f64 },
    Add { a: NodeId, b: NodeId },
    GradientReversal { x: NodeId, lambda: f64 },
    Reshape(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Affine { .. } => OpKind::Affine,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Concat { .. } => OpKind::Concat,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
            Op::Scale { .. } => OpKind::Scale,
            Op::Add { .. } => OpKind::Add,
            Op::GradientReversal { .. } => OpKind::GradientReversal,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
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

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Corrupts the backward rule of `kind` by a factor of 1.5. Only for
    /// exercising the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// `x · W + b` for `x: [B, m]`, `W: [m, k]`, `b: [k]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = affine_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine { x, w, b }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), out)
    }

    /// Valid cross-correlation of `x: [B, C, H, W]` with `k: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(k), self.value(b), stride)?;
        Ok(self.push(Op::Conv2d { x, k, b, stride }, out))
    }

    /// Non-overlapping 2×2 max pooling over the two trailing axes.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = max_pool2_forward(self.value(x))?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, out))
    }

    /// Column-wise concatenation of `[B, m]` and `[B, k]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat { a, b }, out))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (loss, probs) = softmax_cross_entropy_forward(self.value(logits), targets)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            loss,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// `Σ x ⊙ weights` with `weights` held constant.
    pub fn dot(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let value = self.value(x);
        if value.shape() != weights.shape() {
            return Err(Error::Dimension(format!(
                "dot of {:?} with weights {:?}",
                value.shape(),
                weights.shape()
            )));
        }
        let total = value.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::Dot { x, weights }, Tensor::scalar(total)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add_scaled(self.value(b), 1.0)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the way back.
    pub fn gradient_reversal(&mut self, x: NodeId, lambda: f64) -> NodeId {
        let out = self.value(x).clone();
        self.push(Op::GradientReversal { x, lambda }, out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: &NodeId| &values[id.0];
            let out = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Affine { x, w, b } => affine_forward(v(x), v(w), v(b))?,
                Op::Relu(x) => v(x).map(|a| if a > 0.0 { a } else { 0.0 }),
                Op::Conv2d { x, k, b, stride } => conv2d_forward(v(x), v(k), v(b), *stride)?,
                Op::MaxPool2 { x, .. } => max_pool2_forward(v(x))?.0,
                Op::Concat { a, b } => concat_forward(v(a), v(b))?,
                Op::SoftmaxCrossEntropy { logits, targets, .. } => {
                    softmax_cross_entropy_forward(v(logits), targets)?.0
                }
                Op::Sum(x) => Tensor::scalar(v(x).data().iter().sum()),
                Op::Dot { x, weights } => Tensor::scalar(
                    v(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum(),
                ),
                Op::Scale { x, factor } => v(x).map(|a| a * factor),
                Op::Add { a, b } => v(a).add_scaled(v(b), 1.0)?,
                Op::GradientReversal { x, .. } => v(x).clone(),
                Op::Reshape(x) => v(x).clone().reshape(node.value.shape().to_vec())?,
            };
            values.push(out);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// node on the tape (zero for nodes that are not ancestors of `loss`).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(idx);
            let Some(upstream) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[idx];
            let fault = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
            let mut contributions: Vec<(NodeId, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) = affine_backward(self.value(*x), self.value(*w), upstream);
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                    contributions.push((*b, db));
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(upstream)
                        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                        .collect();
                    contributions.push((*x, dx));
                }
                Op::Conv2d { x, k, b, stride } => {
                    let (dx, dk, db) =
                        conv2d_backward(self.value(*x), self.value(*k), upstream, *stride);
                    contributions.push((*x, dx));
                    contributions.push((*k, dk));
                    contributions.push((*b, db));
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&src, &g) in argmax.iter().zip(upstream) {
                        dx[src] += g;
                    }
                    contributions.push((*x, dx));
                }
                Op::Concat { a, b } => {
                    let batch = node.value.batch();
                    let wa = self.value(*a).len() / batch.max(1);
                    let wb = self.value(*b).len() / batch.max(1);
                    let mut da = Vec::with_capacity(batch * wa);
                    let mut db = Vec::with_capacity(batch * wb);
                    for row in upstream.chunks(wa + wb) {
                        da.extend_from_slice(&row[..wa]);
                        db.extend_from_slice(&row[wa..]);
                    }
                    contributions.push((*a, da));
                    contributions.push((*b, db));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let batch = targets.len();
                    let classes = probs.len() / batch;
                    let scale = upstream[0] / batch as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * classes + t] -= scale;
                    }
                    contributions.push((*logits, dl));
                }
                Op::Sum(x) => {
                    contributions.push((*x, vec![upstream[0]; self.value(*x).len()]));
                }
                Op::Dot { x, weights } => {
                    let dx = weights.data().iter().map(|w| w * upstream[0]).collect();
                    contributions.push((*x, dx));
                }
                Op::Scale { x, factor } => {
                    contributions.push((*x, upstream.iter().map(|g| g * factor).collect()));
                }
                Op::Add { a, b } => {
                    contributions.push((*a, upstream.to_vec()));
                    contributions.push((*b, upstream.to_vec()));
                }
                Op::GradientReversal { x, lambda } => {
                    contributions.push((*x, upstream.iter().map(|g| -lambda * g).collect()));
                }
                Op::Reshape(x) => contributions.push((*x, upstream.to_vec())),
            }
            for (target, mut g) in contributions {
                if fault != 1.0 {
                    g.iter_mut().for_each(|v| *v *= fault);
                }
                match &mut before[target.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`]; nodes that are not ancestors of
/// the loss read as zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_touched(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
        return Err(Error::Dimension(format!(
            "affine expects x [B, m], W [m, k], b [k]; got x {:?}, W {:?}, b {:?}",
            xs, ws, bs
        )));
    }
    let (batch, m, k) = (xs[0], xs[1], ws[1]);
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(batch * k);
    for i in 0..batch {
        let mut row = b.data().to_vec();
        for t in 0..m {
            let xv = xd[i * m + t];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[t * k..(t + 1) * k];
            for (r, wv) in row.iter_mut().zip(wrow) {
                *r += xv * wv;
            }
        }
        out.extend_from_slice(&row);
    }
    Tensor::new(vec![batch, k], out)
}

fn affine_backward(x: &Tensor, w: &Tensor, upstream: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (batch, m) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut dx = vec![0.0; batch * m];
    let mut dw = vec![0.0; m * k];
    let mut db = vec![0.0; k];
    for i in 0..batch {
        let g = &upstream[i * k..(i + 1) * k];
        for (acc, gv) in db.iter_mut().zip(g) {
            *acc += gv;
        }
        for t in 0..m {
            let wrow = &wd[t * k..(t + 1) * k];
            dx[i * m + t] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            let xv = xd[i * m + t];
            if xv != 0.0 {
                for (acc, gv) in dw[t * k..(t + 1) * k].iter_mut().zip(g) {
                    *acc += xv * gv;
                }
            }
        }
    }
    (dx, dw, db)
}

struct ConvDims {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv2d_dims(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<ConvDims> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 || b.shape() != [ks[0]] || xs[1] != ks[1] || stride == 0 {
        return Err(Error::Dimension(format!(
            "conv2d expects x [B, C, H, W], kernels [F, C, kh, kw], bias [F], stride ≥ 1; \
             got x {:?}, kernels {:?}, bias {:?}, stride {}",
            xs,
            ks,
            b.shape(),
            stride
        )));
    }
    let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
    if kh > h || kw > w {
        return Err(Error::Dimension(format!(
            "conv2d kernel {:?} larger than input {:?}",
            ks, xs
        )));
    }
    Ok(ConvDims {
        batch: xs[0],
        channels: xs[1],
        h,
        w,
        filters: ks[0],
        kh,
        kw,
        oh: (h - kh) / stride + 1,
        ow: (w - kw) / stride + 1,
    })
}

fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let ConvDims {
        batch,
        channels: c,
        h,
        w,
        filters: f,
        kh,
        kw,
        oh,
        ow,
    } = conv2d_dims(x, k, b, stride)?;
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let mut out = vec![0.0; batch * f * oh * ow];
    for n in 0..batch {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            let xrow = ((n * c + ci) * h + oy * stride + ky) * w + ox * stride;
                            let krow = ((fi * c + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                acc += xd[xrow + kx] * kd[krow + kx];
                            }
                        }
                    }
                    out[((n * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![batch, f, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    upstream: &[f64],
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (xs, ks) = (x.shape(), k.shape());
    let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let (xd, kd) = (x.data(), k.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; f];
    for n in 0..batch {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = upstream[((n * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    db[fi] += g;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let xrow = ((n * c + ci) * h + oy * stride + ky) * w + ox * stride;
                            let krow = ((fi * c + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                dx[xrow + kx] += g * kd[krow + kx];
                                dk[krow + kx] += g * xd[xrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

fn max_pool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max_pool2 needs even trailing spatial dims, got {:?}",
            s
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // Strict comparison keeps the first maximum in row-major order.
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = s.to_vec();
    let rank = shape.len();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Ok((Tensor::new(shape, out)?, argmax))
}

fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Dimension(format!(
            "concat_features needs [B, m] and [B, k], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (batch, wa, wb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(batch * (wa + wb));
    for i in 0..batch {
        out.extend_from_slice(&a.data()[i * wa..(i + 1) * wa]);
        out.extend_from_slice(&b.data()[i * wb..(i + 1) * wb]);
    }
    Tensor::new(vec![batch, wa + wb], out)
}

fn softmax_cross_entropy_forward(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() || targets.is_empty() {
        return Err(Error::Dimension(format!(
            "softmax_cross_entropy needs logits [B, K] with B = {} ≥ 1, got {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let classes = logits.shape()[1];
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index(format!(
                "target {} out of range for {} classes (row {})",
                t, classes, i
            )));
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[t];
        probs.extend(row.iter().map(|v| (v - max).exp() / sum_exp));
    }
    Ok((Tensor::scalar(total / targets.len() as f64), probs))
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max |a - b| / max(max |a|, max |b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / a.max_abs().max(b.max_abs()).max(floor)
}
