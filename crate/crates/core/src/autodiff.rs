//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes whose inputs are always earlier nodes, so the tape is in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, matrix_dims, ConvGeom, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Relu,
    Mean,
    Sum,
    Reshape,
    Concat,
    SelectRows,
    Conv2d,
    CrossEntropy,
    Dropout,
}

impl OpKind {
    /// Every differentiable op, in the order reports list them.
    pub const DIFFERENTIABLE: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::SelectRows,
        OpKind::Conv2d,
        OpKind::CrossEntropy,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Reshape => "flatten",
            OpKind::Concat => "concat",
            OpKind::SelectRows => "select_rows",
            OpKind::Conv2d => "conv2d",
            OpKind::CrossEntropy => "softmax_cross_entropy",
            OpKind::Dropout => "dropout",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Conv2d(NodeId, NodeId, ConvGeom),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Dropout(NodeId, Vec<f64>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Dropout(..) => OpKind::Dropout,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when `id` does not
    /// influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: doubles the backward contribution of every `kind` node.
    /// Used to prove the gradient checker catches a broken backward.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value.detach(), true)
    }

    /// Records a constant leaf; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value.detach(), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The node's value, carrying the node handle when it tracks gradients.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.value
            .clone()
            .with_node(node.requires_grad.then_some(id))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(av, "matmul")?;
        let (k2, n) = matrix_dims(bv, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let out = Tensor::new(vec![m, n], gemm(av.data(), bv.data(), m, k, n, false, false))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// Adds a per-channel bias: `bias` has `x.shape[1]` entries and is
    /// broadcast over the batch axis and any trailing axes.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() < 2 || bv.numel() != xv.shape()[1] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let channels = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.clone().detach();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % channels];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(Op::ScalarMul(a, s), out, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), out, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scalar_mul(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        // NaN passes through so divergence is never masked.
        let out = self.value(a).map(|x| if x <= 0.0 { 0.0 } else { x });
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), out, rg)
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), out, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Collapses all non-batch axes: `[n, …] → [n, prod(…)]`. A rank-1
    /// input becomes a single row.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let shape = if v.shape().len() == 1 {
            vec![v.numel()]
        } else {
            vec![v.rows(), v.row_len()]
        };
        self.reshape(a, shape)
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), out, rg))
    }

    /// Gathers rows along axis 0.
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let out = self.value(a).select_rows(idx)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), out, rg))
    }

    /// 2-D cross-correlation of `[n,c,h,w]` input with `[o,c,kh,kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let geom = ConvGeom::new(iv.shape(), kv.shape(), stride, padding)?;
        let out = Tensor::new(geom.out_shape(), geom.forward(iv.data(), kv.data()))?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(Op::Conv2d(input, kernel, geom), out, rg))
    }

    /// Mean softmax cross-entropy of `[n×K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.cross_entropy(logits, labels, 0.0)
    }

    /// Cross-entropy against the smoothed target `(1−ε)·onehot + ε/K`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Contract(format!(
                "label smoothing {smoothing} outside [0,1)"
            )));
        }
        let lv = self.value(logits);
        let (n, k) = matrix_dims(lv, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            let mut loss = -(1.0 - smoothing) * (row[y] - lse);
            if smoothing > 0.0 {
                let sum_logp: f64 = row.iter().map(|&z| z - lse).sum();
                loss -= smoothing / k as f64 * sum_logp;
            }
            total += loss;
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
        }
        let out = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            out,
            rg,
        ))
    }

    /// Multiplies by a fixed mask (already carrying the inverted-dropout scale).
    pub fn dropout_mask(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let av = self.value(a);
        if mask.len() != av.numel() {
            return Err(Error::dim("dropout", av.shape(), &[mask.len()]));
        }
        let mut out = av.clone().detach();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Dropout(a, mask), out, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let scale = if self.fault == Some(node.op.kind()) { 2.0 } else { 1.0 };
            for (input, mut contrib) in self.vjp(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    contrib = contrib.map(|x| x * scale);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        // Only leaves keep their gradients; interior nodes are cleared so
        // `get` reflects the documented leaf semantics and memory is released.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of one node against upstream gradient `g`.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = matrix_dims(av, "matmul")?;
                let n = bv.shape()[1];
                let da = gemm(gd, bv.data(), m, n, k, false, true);
                let db = gemm(av.data(), gd, k, m, n, true, false);
                vec![
                    (*a, Tensor::new(vec![m, k], da)?),
                    (*b, Tensor::new(vec![k, n], db)?),
                ]
            }
            Op::AddBias(x, b) => {
                let shape = self.value(*x).shape();
                let channels = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut db = vec![0.0; channels];
                for (i, &v) in gd.iter().enumerate() {
                    db[(i / inner) % channels] += v;
                }
                vec![(*x, g.clone()), (*b, Tensor::from_vec(db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(bv, |gv, y| gv * y)?),
                    (*b, g.zip_map(av, |gv, x| gv * x)?),
                ]
            }
            Op::ScalarMul(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => {
                let gate = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                vec![(*a, gate)]
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = gd[0] / av.numel() as f64;
                vec![(*a, Tensor::full(av.shape(), v))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), gd[0]))],
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape().to_vec())?)],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.numel();
                    let slice = gd[offset..offset + len].to_vec();
                    out.push((*p, Tensor::new(pv.shape().to_vec(), slice)?));
                    offset += len;
                }
                out
            }
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let w = av.row_len();
                let mut da = vec![0.0; av.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..w {
                        da[src * w + j] += gd[r * w + j];
                    }
                }
                vec![(*a, Tensor::new(av.shape().to_vec(), da)?)]
            }
            Op::Conv2d(x, k, geom) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (dx, dk) = geom.backward(xv.data(), kv.data(), gd);
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), dx)?),
                    (*k, Tensor::new(kv.shape().to_vec(), dk)?),
                ]
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = gd[0] / n as f64;
                let off = smoothing / k as f64;
                let mut dl = Vec::with_capacity(n * k);
                for (i, &y) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        let target = (1.0 - smoothing) * onehot + off;
                        dl.push((probs[i * k + c] - target) * scale);
                    }
                }
                vec![(*logits, Tensor::new(vec![n, k], dl)?)]
            }
            Op::Dropout(a, mask) => {
                let mut da = g.clone();
                for (v, m) in da.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                vec![(*a, da)]
            }
        })
    }
}

/// Builds a scalar loss on a fresh tape from leaves bound to the inputs.
pub trait ScalarFn: Fn(&mut Tape, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>> ScalarFn for F {}

/// Central-difference check of tape gradients for every coordinate of every
/// input; returns the largest relative error, with relative error measured
/// against `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_many(f: impl ScalarFn, xs: &[Tensor], eps: f64) -> Result<f64> {
    grad_check_with(Tape::new, f, xs, eps)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check(
    f: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    grad_check_many(|t: &mut Tape, ids: &[NodeId]| f(t, ids[0]), std::slice::from_ref(x), eps)
}

#[doc(hidden)]
pub fn grad_check_with(
    make_tape: impl Fn() -> Tape,
    f: impl ScalarFn,
    xs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    let mut tape = make_tape();
    let ids: Vec<NodeId> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for i in 0..xs[which].numel() {
            let orig = xs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(mat(&[vec![1.0, 2.0]]));
        let b = t.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_sum_of_ones_and_scaling() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).item(), 9.0);

        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = t.constant(Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap());
        let k = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let y = t.conv2d(x, k, 1, 0).unwrap();
        let doubled: Vec<f64> = data.iter().map(|v| v * 2.0).collect();
        assert_eq!(t.value(y).data(), doubled.as_slice());
    }

    #[test]
    fn conv_kernel_larger_than_padded_input() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(t.conv2d(x, k, 1, 1), Err(Error::Dimension { .. })));
        assert!(t.conv2d(x, k, 1, 2).is_ok());
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 1.0]);

        let pos = Tensor::from_vec(vec![0.5, 3.0, 7.25]);
        let mut t = Tape::new();
        let x = t.constant(pos.clone());
        let y = t.relu(x);
        assert!(t.value(y).bit_eq(&pos));
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 10]));
        let l = t.softmax_cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let z = t.constant(mat(&[vec![1000.0, 0.0]]));
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);

        assert!(matches!(
            t.softmax_cross_entropy(z, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn reduce_suite() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![2.0, 4.0, 6.0]));
        let m = t.mean(x);
        assert_eq!(t.value(m).item(), 4.0);

        let x = t.constant(mat(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let f = t.reshape(x, vec![6]).unwrap();
        assert_eq!(t.value(f).shape(), &[6]);
        assert_eq!(t.value(f).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.constant(Tensor::from_vec(vec![3.0]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);

        let d = t.constant(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
        assert!(t.add(a, d).is_err());
        assert!(t.sub(a, d).is_err());
    }

    #[test]
    fn concat_backward_splits_upstream() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.param(Tensor::from_vec(vec![3.0]));
        let c = t.concat(&[a, b]).unwrap();
        let w = t.constant(Tensor::from_vec(vec![10.0, 20.0, 30.0]));
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).data(), &[10.0, 20.0]);
        assert_eq!(g.get(b).data(), &[30.0]);
    }

    #[test]
    fn backward_quadratic_and_unused_leaf() {
        let mut t = Tape::new();
        let w = t.param(Tensor::from_vec(vec![1.0, -2.0]));
        let unused = t.param(Tensor::zeros(&[2, 3]));
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[2.0, -4.0]);
        let gu = g.get(unused);
        assert_eq!(gu.shape(), &[2, 3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = t.relu(w);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = t.param(Tensor::from_vec(vec![3.0, 4.0]));
        let p = t.mul(x, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get_ref(x).is_none());
        assert_eq!(g.get(w).data(), &[1.0, 2.0]);
        assert!(!t.tensor(x).is_tracked());
        assert!(t.tensor(p).is_tracked());
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(
            |t, x| t.mul(x, x).map(|y| t.sum(y)),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &Tensor::scalar(1.0), 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
