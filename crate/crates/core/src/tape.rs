//! Wengert tape: reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded in forward order and replayed in reverse to
//! accumulate adjoints. The primitive set is closed; everything the trainer
//! differentiates (GRU cell, Gaussian log-density, cosine distance, clipped
//! surrogate terms) is composed from these primitives so the
//! finite-difference test surface stays small.
//!
//! A tape is a single-owner object: one tape per worker, never shared.
//! Adjoint accumulation order is fixed (descending node id) so identical op
//! sequences produce bitwise-identical values and adjoints.

use crate::scalar::Real;
use crate::tensor::Tensor;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("node id {0} out of range")]
    BadNode(NodeId),
}

/// Primitive operation kinds. The set is closed and fixed.
#[derive(Debug, Clone)]
pub enum Op<S> {
    Constant,
    Input,
    Add,
    Sub,
    /// Elementwise product of two same-shape tensors.
    Mul,
    MatMul,
    MatVec,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    /// Sum of all elements -> scalar.
    Sum,
    /// Mean of all elements -> scalar.
    Mean,
    /// Inner product of two same-length vectors -> scalar.
    Dot,
    /// Euclidean norm of a vector -> scalar.
    L2Norm,
    /// Concatenation of 1-d vectors in parent order.
    Concat,
    /// Contiguous 1-d slice of the parent.
    Slice { offset: usize, len: usize },
    /// Multiplication by a compile-time constant factor.
    Scale { factor: S },
    /// Identity forward; blocks adjoint flow to the parent.
    StopGradient,
}

impl<S> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::MatVec => "matvec",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Dot => "dot",
            Op::L2Norm => "l2norm",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Scale { .. } => "scale",
            Op::StopGradient => "stop_gradient",
        }
    }
}

pub struct TapeNode<S> {
    pub id: NodeId,
    pub op: Op<S>,
    pub parents: Vec<NodeId>,
    pub value: Tensor<S>,
    pub adjoint: Tensor<S>,
    /// True once any adjoint mass reached this node in the current sweep.
    dirty: bool,
}

pub struct Tape<S> {
    nodes: Vec<TapeNode<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn adjoint(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].adjoint
    }

    pub fn node(&self, id: NodeId) -> &TapeNode<S> {
        &self.nodes[id]
    }

    fn push(&mut self, op: Op<S>, parents: Vec<NodeId>, value: Tensor<S>) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        let adjoint = Tensor::zeros(value.shape());
        self.nodes.push(TapeNode { id, op, parents, value, adjoint, dirty: false });
        id
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Constant, vec![], value)
    }

    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    /// Record a primitive, computing its forward value from the parents.
    pub fn record(&mut self, op: Op<S>, parents: &[NodeId]) -> Result<NodeId, TapeError> {
        for &p in parents {
            if p >= self.nodes.len() {
                return Err(TapeError::BadNode(p));
            }
        }
        let value = self.forward(&op, parents)?;
        if !value.all_finite() {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        Ok(self.push(op, parents.to_vec(), value))
    }

    fn shape_err(op: &'static str, parents: &[&Tensor<S>]) -> TapeError {
        let detail = parents
            .iter()
            .map(|t| format!("{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(" x ");
        TapeError::Shape { op, detail }
    }

    fn forward(&self, op: &Op<S>, parents: &[NodeId]) -> Result<Tensor<S>, TapeError> {
        let p: Vec<&Tensor<S>> = parents.iter().map(|&i| &self.nodes[i].value).collect();
        let name = op.name();
        match op {
            Op::Constant | Op::Input => Err(TapeError::Shape {
                op: name,
                detail: "leaves are created via constant()/input()".into(),
            }),
            Op::Add | Op::Sub | Op::Mul => {
                if p.len() != 2 || p[0].shape() != p[1].shape() {
                    return Err(Self::shape_err(name, &p));
                }
                let data = p[0]
                    .data()
                    .iter()
                    .zip(p[1].data())
                    .map(|(&a, &b)| match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        _ => a * b,
                    })
                    .collect();
                Ok(Tensor::new(p[0].shape().to_vec(), data))
            }
            Op::MatMul => {
                if p.len() != 2 || p[0].rank() != 2 || p[1].rank() != 2 || p[0].cols() != p[1].rows()
                {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(crate::linalg::matmul(p[0], p[1]))
            }
            Op::MatVec => {
                if p.len() != 2
                    || p[0].rank() != 2
                    || p[1].rank() != 1
                    || p[0].cols() != p[1].len()
                {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(Tensor::vector(crate::linalg::matvec(p[0], p[1].data())))
            }
            Op::Tanh | Op::Sigmoid | Op::Exp | Op::Log => {
                if p.len() != 1 {
                    return Err(Self::shape_err(name, &p));
                }
                let data = p[0]
                    .data()
                    .iter()
                    .map(|&x| match op {
                        Op::Tanh => x.tanh(),
                        Op::Sigmoid => S::one() / (S::one() + (-x).exp()),
                        Op::Exp => x.exp(),
                        _ => x.ln(),
                    })
                    .collect();
                Ok(Tensor::new(p[0].shape().to_vec(), data))
            }
            Op::Sum => {
                if p.len() != 1 {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(Tensor::scalar(p[0].data().iter().copied().sum()))
            }
            Op::Mean => {
                if p.len() != 1 || p[0].is_empty() {
                    return Err(Self::shape_err(name, &p));
                }
                let n = S::lit(p[0].len() as f64);
                Ok(Tensor::scalar(p[0].data().iter().copied().sum::<S>() / n))
            }
            Op::Dot => {
                if p.len() != 2 || p[0].rank() != 1 || p[0].shape() != p[1].shape() {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(Tensor::scalar(crate::linalg::dot(p[0].data(), p[1].data())))
            }
            Op::L2Norm => {
                if p.len() != 1 || p[0].rank() != 1 {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(Tensor::scalar(crate::linalg::norm2(p[0].data())))
            }
            Op::Concat => {
                if p.is_empty() || p.iter().any(|t| t.rank() != 1) {
                    return Err(Self::shape_err(name, &p));
                }
                let mut data = Vec::with_capacity(p.iter().map(|t| t.len()).sum());
                for t in &p {
                    data.extend_from_slice(t.data());
                }
                Ok(Tensor::vector(data))
            }
            Op::Slice { offset, len } => {
                if p.len() != 1 || p[0].rank() != 1 || offset + len > p[0].len() {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(Tensor::vector(p[0].data()[*offset..offset + len].to_vec()))
            }
            Op::Scale { factor } => {
                if p.len() != 1 {
                    return Err(Self::shape_err(name, &p));
                }
                let data = p[0].data().iter().map(|&x| x * *factor).collect();
                Ok(Tensor::new(p[0].shape().to_vec(), data))
            }
            Op::StopGradient => {
                if p.len() != 1 {
                    return Err(Self::shape_err(name, &p));
                }
                Ok(p[0].clone())
            }
        }
    }

    // ── convenience wrappers ─────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::MatMul, &[a, b])
    }
    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::MatVec, &[m, x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Tanh, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sigmoid, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Log, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Sum, &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Mean, &[x])
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::Dot, &[a, b])
    }
    pub fn l2norm(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::L2Norm, &[x])
    }
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, TapeError> {
        self.record(Op::Concat, xs)
    }
    pub fn slice(&mut self, x: NodeId, offset: usize, len: usize) -> Result<NodeId, TapeError> {
        self.record(Op::Slice { offset, len }, &[x])
    }
    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId, TapeError> {
        self.record(Op::Scale { factor }, &[x])
    }
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        self.record(Op::StopGradient, &[x])
    }

    /// x + c for a scalar constant c (recorded as a constant leaf + add).
    pub fn add_const(&mut self, x: NodeId, c: S) -> Result<NodeId, TapeError> {
        let shape = self.value(x).shape().to_vec();
        let k = self.constant(Tensor::full(&shape, c));
        self.add(x, k)
    }

    // ── reverse sweep ────────────────────────────────────────────────

    pub fn reset_adjoints(&mut self) {
        for node in &mut self.nodes {
            if node.dirty {
                for a in node.adjoint.data_mut() {
                    *a = S::zero();
                }
                node.dirty = false;
            }
        }
    }

    /// Reverse sweep from a scalar output: afterwards every node's adjoint
    /// holds the derivative of the output with respect to that node's value.
    pub fn backward(&mut self, output: NodeId) -> Result<(), TapeError> {
        if output >= self.nodes.len() {
            return Err(TapeError::BadNode(output));
        }
        if !self.nodes[output].value.is_scalar() {
            return Err(TapeError::NonScalarOutput {
                shape: self.nodes[output].value.shape().to_vec(),
            });
        }
        self.nodes[output].adjoint = Tensor::scalar(S::one());
        self.nodes[output].dirty = true;
        for i in (0..=output).rev() {
            if !self.nodes[i].dirty {
                continue;
            }
            let contribs = self.parent_contributions(i);
            for (pid, c) in contribs {
                let parent = &mut self.nodes[pid];
                for (a, v) in parent.adjoint.data_mut().iter_mut().zip(c) {
                    *a += v;
                }
                parent.dirty = true;
            }
        }
        Ok(())
    }

    /// Adjoint of `target` after a fresh reverse sweep from `output`.
    /// Returns a zero tensor when `target` is not an ancestor of `output`.
    pub fn grad_wrt(&mut self, output: NodeId, target: NodeId) -> Result<Tensor<S>, TapeError> {
        if target >= self.nodes.len() {
            return Err(TapeError::BadNode(target));
        }
        self.reset_adjoints();
        self.backward(output)?;
        Ok(self.nodes[target].adjoint.clone())
    }

    /// Vector-Jacobian contributions of node `i` to each of its parents.
    fn parent_contributions(&self, i: usize) -> Vec<(NodeId, Vec<S>)> {
        let node = &self.nodes[i];
        let d = node.adjoint.data();
        let val = |p: usize| self.nodes[node.parents[p]].value.data();
        let pid = |p: usize| node.parents[p];
        match &node.op {
            Op::Constant | Op::Input | Op::StopGradient => vec![],
            Op::Add => vec![(pid(0), d.to_vec()), (pid(1), d.to_vec())],
            Op::Sub => vec![
                (pid(0), d.to_vec()),
                (pid(1), d.iter().map(|&x| -x).collect()),
            ],
            Op::Mul => vec![
                (pid(0), d.iter().zip(val(1)).map(|(&g, &b)| g * b).collect()),
                (pid(1), d.iter().zip(val(0)).map(|(&g, &a)| g * a).collect()),
            ],
            Op::MatMul => {
                let a = &self.nodes[node.parents[0]].value;
                let b = &self.nodes[node.parents[1]].value;
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                // dA = dC B^T ; dB = A^T dC
                let mut da = vec![S::zero(); m * k];
                let mut db = vec![S::zero(); k * n];
                for r in 0..m {
                    for c in 0..n {
                        let g = d[r * n + c];
                        if g == S::zero() {
                            continue;
                        }
                        for t in 0..k {
                            da[r * k + t] += g * b.at(t, c);
                            db[t * n + c] += g * a.at(r, t);
                        }
                    }
                }
                vec![(pid(0), da), (pid(1), db)]
            }
            Op::MatVec => {
                let m = &self.nodes[node.parents[0]].value;
                let x = val(1);
                let (rows, cols) = (m.rows(), m.cols());
                let mut dm = vec![S::zero(); rows * cols];
                let mut dx = vec![S::zero(); cols];
                for r in 0..rows {
                    let g = d[r];
                    if g == S::zero() {
                        continue;
                    }
                    for c in 0..cols {
                        dm[r * cols + c] += g * x[c];
                        dx[c] += g * m.at(r, c);
                    }
                }
                vec![(pid(0), dm), (pid(1), dx)]
            }
            Op::Tanh => {
                let y = node.value.data();
                vec![(pid(0), d.iter().zip(y).map(|(&g, &t)| g * (S::one() - t * t)).collect())]
            }
            Op::Sigmoid => {
                let y = node.value.data();
                vec![(pid(0), d.iter().zip(y).map(|(&g, &s)| g * s * (S::one() - s)).collect())]
            }
            Op::Exp => {
                let y = node.value.data();
                vec![(pid(0), d.iter().zip(y).map(|(&g, &e)| g * e).collect())]
            }
            Op::Log => {
                let x = val(0);
                vec![(pid(0), d.iter().zip(x).map(|(&g, &v)| g / v).collect())]
            }
            Op::Sum => {
                let n = self.nodes[node.parents[0]].value.len();
                vec![(pid(0), vec![d[0]; n])]
            }
            Op::Mean => {
                let n = self.nodes[node.parents[0]].value.len();
                let g = d[0] / S::lit(n as f64);
                vec![(pid(0), vec![g; n])]
            }
            Op::Dot => {
                let g = d[0];
                vec![
                    (pid(0), val(1).iter().map(|&y| g * y).collect()),
                    (pid(1), val(0).iter().map(|&x| g * x).collect()),
                ]
            }
            Op::L2Norm => {
                let s = node.value.item();
                let g = d[0];
                let x = val(0);
                let dx = if s > S::zero() {
                    x.iter().map(|&v| g * v / s).collect()
                } else {
                    // subgradient convention at the origin
                    vec![S::zero(); x.len()]
                };
                vec![(pid(0), dx)]
            }
            Op::Concat => {
                let mut out = Vec::with_capacity(node.parents.len());
                let mut off = 0;
                for (slot, &p) in node.parents.iter().enumerate() {
                    let n = self.nodes[p].value.len();
                    out.push((pid(slot), d[off..off + n].to_vec()));
                    off += n;
                }
                out
            }
            Op::Slice { offset, len } => {
                let n = self.nodes[node.parents[0]].value.len();
                let mut dx = vec![S::zero(); n];
                dx[*offset..offset + len].copy_from_slice(&d[..*len]);
                vec![(pid(0), dx)]
            }
            Op::Scale { factor } => {
                vec![(pid(0), d.iter().map(|&g| g * *factor).collect())]
            }
        }
    }
}
