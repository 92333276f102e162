//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in topological order
//! (append order) and replays it in reverse to accumulate gradients. Graphs
//! are rebuilt per training step; parameters live outside the tape as
//! [`ParamNode`]s and are attached as named leaves.

use std::collections::HashMap;

use crate::diffcore::array::{matmul_nt_into, matmul_tn_into, DenseArray};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// A trainable tensor: value, gradient of the same shape, and a stable name
/// used to route gradients back from the tape.
#[derive(Debug, Clone)]
pub struct ParamNode {
    name: String,
    pub value: DenseArray,
    pub grad: DenseArray,
}

impl ParamNode {
    pub fn new(name: impl Into<String>, value: DenseArray) -> Self {
        let grad = DenseArray::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Add the matching entry of `grads` (if any) into this node's gradient.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if let Some(g) = grads.get(&self.name) {
            self.grad.add_assign(g)?;
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name, as produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_name: HashMap<String, DenseArray>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.by_name.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

enum Op {
    Const,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    MatMul(NodeId, NodeId),
    /// `[m,n] + row[n]`, row broadcast over every row.
    AddRow(NodeId, NodeId),
    /// `[m,n] * row[n]`, row broadcast over every row.
    MulRow(NodeId, NodeId),
    SumAll(NodeId),
    /// `[m,n] -> [m,1]` row sums.
    SumRows(NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    /// Per-row `-log softmax(logits)[label]`; cached softmax feeds backward.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        softmax: DenseArray,
    },
}

struct Node {
    value: DenseArray,
    op: Op,
}

/// Recorded computation graph. Node order is the topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseArray, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Attach a constant (non-differentiable) array.
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(DenseArray::scalar(value))
    }

    /// Attach a parameter leaf. Repeated attachment of the same name returns
    /// the existing leaf so every use shares one gradient slot.
    pub fn param(&mut self, p: &ParamNode) -> NodeId {
        if let Some(&id) = self.params.get(p.name()) {
            return id;
        }
        let id = self.push(p.value.clone(), Op::Param);
        self.params.insert(p.name().to_string(), id);
        id
    }

    fn binary_shape(&self, context: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(a).is_scalar() {
            Ok(sb.to_vec())
        } else if self.value(b).is_scalar() {
            Ok(sa.to_vec())
        } else {
            Err(Error::dims(context, sa, sb))
        }
    }

    /// Element-wise addition; operands of equal shape, or one scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = broadcast_zip(va, vb, |x, y| x + y);
        Ok(self.push(DenseArray::new(shape, data)?, Op::Add(a, b)))
    }

    /// Element-wise multiplication; operands of equal shape, or one scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = broadcast_zip(va, vb, |x, y| x * y);
        Ok(self.push(DenseArray::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `[m,n] + row` where `row` has shape `[n]` or `[1,n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = mat_dims(self.value(a));
        if self.value(row).len() != n {
            return Err(Error::dims("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(DenseArray::new(shape, data)?, Op::AddRow(a, row)))
    }

    /// `[m,n] * row` where `row` has shape `[n]` or `[1,n]`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = mat_dims(self.value(a));
        if self.value(row).len() != n {
            return Err(Error::dims("mul_row", self.value(a).shape(), self.value(row).shape()));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= r[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(DenseArray::new(shape, data)?, Op::MulRow(a, row)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::SumAll(a))
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = mat_dims(self.value(a));
        let data: Vec<f64> = (0..m)
            .map(|i| self.value(a).data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        Ok(self.push(DenseArray::matrix(m, 1, data)?, Op::SumRows(a)))
    }

    /// Mean of all entries.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let len = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Numerically stabilized `-log softmax(logits)[label]` for a single
    /// logit vector. `logits` may be shaped `[p]` or `[1,p]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let p = self.value(logits).len();
        let flat = self.reshape(logits, vec![1, p])?;
        let rows = self.softmax_cross_entropy_rows(flat, &[label])?;
        self.reshape(rows, vec![1])
    }

    /// Per-row cross entropy: `logits [m,p]`, `labels` of length `m`,
    /// output `[m,1]`. Stabilized by per-row max subtraction.
    pub fn softmax_cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, p) = mat_dims(self.value(logits));
        if p < 2 {
            return Err(Error::Contract(format!(
                "softmax cross entropy needs at least 2 classes, got {p}"
            )));
        }
        if labels.len() != m {
            return Err(Error::Contract(format!(
                "{} labels for {} logit rows",
                labels.len(),
                m
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= p) {
            return Err(Error::Index(format!("label {bad} out of range for {p} classes")));
        }
        let mut softmax = vec![0.0; m * p];
        let mut losses = vec![0.0; m];
        for i in 0..m {
            let row = &self.value(logits).data()[i * p..(i + 1) * p];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for &x in row {
                denom += (x - mx).exp();
            }
            let lse = denom.ln();
            losses[i] = lse - (row[labels[i]] - mx);
            for j in 0..p {
                softmax[i * p + j] = ((row[j] - mx).exp()) / denom;
            }
        }
        let value = DenseArray::matrix(m, 1, losses)?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax: DenseArray::matrix(m, p, softmax)?,
            },
        ))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// parameter leaf reachable from `root`, keyed by parameter name; feed
    /// them to [`ParamNode::accumulate`]. Accumulating the result of two
    /// backward calls without a reset adds up, per the gradient contract.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DenseArray::full(self.value(root).shape().to_vec(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, id) in &self.params {
            if let Some(g) = grads[id.0].take() {
                out.by_name.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let add_to = |grads: &mut [Option<DenseArray>], id: NodeId, delta: DenseArray| -> Result<()> {
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&delta)?,
                slot => *slot = Some(delta),
            }
            Ok(())
        };
        // Gradient flowing into a scalar operand of a broadcast op collapses
        // to the sum over the broadcast positions.
        let reduce_for = |target: &DenseArray, full: DenseArray| -> DenseArray {
            if target.is_scalar() && !full.is_scalar() {
                DenseArray::scalar(full.data().iter().sum())
            } else {
                full
            }
        };

        match &self.nodes[idx].op {
            Op::Const | Op::Param => {}
            Op::Add(a, b) => {
                let da = reduce_for(self.value(*a), g.clone());
                add_to(grads, *a, da)?;
                let db = reduce_for(self.value(*b), g.clone());
                add_to(grads, *b, db)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da_full = broadcast_grad_times(g, vb, va.shape());
                add_to(grads, *a, reduce_for(va, da_full))?;
                let db_full = broadcast_grad_times(g, va, vb.shape());
                add_to(grads, *b, reduce_for(vb, db_full))?;
            }
            Op::Neg(a) => {
                add_to(grads, *a, g.map(|x| -x))?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                    .collect();
                add_to(grads, *a, DenseArray::new(y.shape().to_vec(), d)?)?;
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi)
                    .collect();
                add_to(grads, *a, DenseArray::new(y.shape().to_vec(), d)?)?;
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| gi / xi)
                    .collect();
                add_to(grads, *a, DenseArray::new(x.shape().to_vec(), d)?)?;
            }
            Op::Scale(a, c) => {
                add_to(grads, *a, g.map(|x| c * x))?;
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = g @ B^T
                let mut da = vec![0.0; m * k];
                matmul_nt_into(&mut da, g.data(), vb.data(), m, n, k);
                add_to(grads, *a, DenseArray::matrix(m, k, da)?)?;
                // dB = A^T @ g
                let mut db = vec![0.0; k * n];
                matmul_tn_into(&mut db, va.data(), g.data(), k, m, n);
                add_to(grads, *b, DenseArray::matrix(k, n, db)?)?;
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone())?;
                let (m, n) = mat_dims(self.value(*a));
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g.data()[i * n + j];
                    }
                }
                let shape = self.value(*row).shape().to_vec();
                add_to(grads, *row, DenseArray::new(shape, dr)?)?;
            }
            Op::MulRow(a, row) => {
                let (m, n) = mat_dims(self.value(*a));
                let r = self.value(*row).data();
                let mut da = vec![0.0; m * n];
                let mut dr = vec![0.0; n];
                let va = self.value(*a).data();
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        da[i * n + j] = gij * r[j];
                        dr[j] += gij * va[i * n + j];
                    }
                }
                add_to(grads, *a, DenseArray::new(self.value(*a).shape().to_vec(), da)?)?;
                add_to(grads, *row, DenseArray::new(self.value(*row).shape().to_vec(), dr)?)?;
            }
            Op::SumAll(a) => {
                let gv = g.item()?;
                let shape = self.value(*a).shape().to_vec();
                add_to(grads, *a, DenseArray::full(shape, gv))?;
            }
            Op::SumRows(a) => {
                let (m, n) = mat_dims(self.value(*a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..n {
                        da[i * n + j] = gi;
                    }
                }
                add_to(grads, *a, DenseArray::matrix(m, n, da)?)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                add_to(grads, *a, g.reshape(shape)?)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let (m, p) = mat_dims(softmax);
                let mut dl = vec![0.0; m * p];
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..p {
                        let one_hot = if j == labels[i] { 1.0 } else { 0.0 };
                        dl[i * p + j] = gi * (softmax.data()[i * p + j] - one_hot);
                    }
                }
                let shape = self.value(*logits).shape().to_vec();
                add_to(grads, *logits, DenseArray::new(shape, dl)?)?;
            }
        }
        Ok(())
    }
}

fn mat_dims(v: &DenseArray) -> (usize, usize) {
    if v.shape().len() >= 2 {
        (v.shape()[0], v.shape()[1])
    } else {
        (1, v.shape()[0])
    }
}

fn broadcast_zip(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.is_scalar() && !b.is_scalar() {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    } else if b.is_scalar() && !a.is_scalar() {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    }
}

/// dOut * other, expanded to `target_shape` (handles the scalar-operand case
/// of broadcast multiplication).
fn broadcast_grad_times(g: &DenseArray, other: &DenseArray, target_shape: &[usize]) -> DenseArray {
    let data = broadcast_zip(g, other, |x, y| x * y);
    if data.len() == target_shape.iter().product::<usize>() {
        DenseArray::new(target_shape.to_vec(), data).expect("broadcast shape")
    } else {
        // g and other were both scalar while the target is not; spread.
        DenseArray::full(target_shape.to_vec(), data[0])
    }
}
