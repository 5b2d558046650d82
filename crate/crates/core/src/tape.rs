//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Values are computed eagerly as operations are recorded, so the tape holds
//! every intermediate needed by the backward sweep. Node ids are indices into
//! the tape, which is topologically ordered by construction: an operand is
//! always recorded before its consumer.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input value: model parameter or constant. Gradients accumulate here
    /// like everywhere else; the caller decides which leaves it cares about.
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Broadcast add: rhs is 1xC, added to every row of lhs.
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    Reshape(NodeId),
    ReduceSum(NodeId),
    /// Elementwise product with a fixed mask (dropout / ablation selection).
    SoftSelect(NodeId, Matrix),
    /// Elementwise Huber loss of (pred - target); target is a constant.
    Huber { pred: NodeId, target: Matrix, delta: f64 },
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Matrix>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Huber value for a single error term.
pub fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * e.abs() - 0.5 * delta * delta
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node; only populated after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0)
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: alloc::string::String) -> CoreError {
        CoreError::Shape { op, detail: format!("at node {}: {detail}", self.nodes.len()) }
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(self.shape_err(
                "matmul",
                format!("lhs {} incompatible with rhs {}", va.shape_str(), vb.shape_str()),
            ));
        }
        let value = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(&Matrix, &Matrix) -> Matrix,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err(
                op_name,
                format!("lhs {} vs rhs {}", va.shape_str(), vb.shape_str()),
            ));
        }
        let value = f(va, vb);
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x.add(y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x.sub(y), Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("hadamard", a, b, |x, y| x.hadamard(y), Op::Hadamard(a, b))
    }

    /// Adds a 1xC row vector to every row of an RxC matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(self.shape_err(
                "add_row",
                format!("lhs {} rhs {} (rhs must be 1x{})", va.shape_str(), vr.shape_str(), va.cols()),
            ));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                let v = value.at(r, c) + vr.at(0, c);
                value.set(r, c, v);
            }
        }
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(self.shape_err(
                "concat_cols",
                format!("lhs {} vs rhs {}", va.shape_str(), vb.shape_str()),
            ));
        }
        let value = va.concat_cols(vb);
        Ok(self.push(Op::ConcatCols(a, b), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(self.shape_err(
                "slice_cols",
                format!("range {start}..{end} out of bounds for {}", va.shape_str()),
            ));
        }
        let value = va.slice_cols(start, end);
        Ok(self.push(Op::SliceCols(a, start, end), value))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(self.shape_err(
                "slice_rows",
                format!("range {start}..{end} out of bounds for {}", va.shape_str()),
            ));
        }
        let value = va.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(a, start, end), value))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        if rows * cols != va.len() {
            return Err(self.shape_err(
                "reshape",
                format!("cannot view {} as {rows}x{cols}", va.shape_str()),
            ));
        }
        let value = va.reshaped(rows, cols);
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Sums all entries into a 1x1 matrix.
    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::ReduceSum(a), value)
    }

    /// Elementwise product with a constant mask of identical shape.
    pub fn soft_select(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(self.shape_err(
                "soft_select",
                format!("value {} vs mask {}", va.shape_str(), mask.shape_str()),
            ));
        }
        let value = va.hadamard(&mask);
        Ok(self.push(Op::SoftSelect(a, mask), value))
    }

    /// Elementwise Huber loss of (pred - target) against a constant target.
    pub fn huber_loss(&mut self, pred: NodeId, target: Matrix, delta: f64) -> Result<NodeId> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(self.shape_err(
                "huber",
                format!("pred {} vs target {}", vp.shape_str(), target.shape_str()),
            ));
        }
        if delta <= 0.0 {
            return Err(CoreError::Config(format!("huber delta must be positive, got {delta}")));
        }
        let value = vp.zip_with(&target, |p, t| huber(p - t, delta));
        Ok(self.push(Op::Huber { pred, target, delta }, value))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).at(0, 0)
    }

    /// Populates one gradient buffer per node by a reverse sweep from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss node; node {} has shape {}",
                loss.0,
                lv.shape_str()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        self.grads[loss.0].set(0, 0, 1.0);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].max_abs() == 0.0 {
                continue;
            }
            let g = self.grads[i].clone();
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose());
                    let db = self.nodes[a.0].value.transpose().matmul(&g);
                    self.grads[a.0].add_assign(&da);
                    self.grads[b.0].add_assign(&db);
                }
                Op::Add(a, b) => {
                    self.grads[a.0].add_assign(&g);
                    self.grads[b.0].add_assign(&g);
                }
                Op::Sub(a, b) => {
                    self.grads[a.0].add_assign(&g);
                    self.grads[b.0].add_scaled(&g, -1.0);
                }
                Op::AddRow(a, row) => {
                    self.grads[a.0].add_assign(&g);
                    self.grads[row.0].add_assign(&g.col_sums());
                }
                Op::Hadamard(a, b) => {
                    let da = g.hadamard(&self.nodes[b.0].value);
                    let db = g.hadamard(&self.nodes[a.0].value);
                    self.grads[a.0].add_assign(&da);
                    self.grads[b.0].add_assign(&db);
                }
                Op::Scale(a, s) => {
                    self.grads[a.0].add_scaled(&g, s);
                }
                Op::Sigmoid(a) => {
                    let d = self.nodes[i].value.zip_with(&g, |s, gg| gg * s * (1.0 - s));
                    self.grads[a.0].add_assign(&d);
                }
                Op::Tanh(a) => {
                    let d = self.nodes[i].value.zip_with(&g, |t, gg| gg * (1.0 - t * t));
                    self.grads[a.0].add_assign(&d);
                }
                Op::Relu(a) => {
                    let d = self.nodes[a.0].value.zip_with(&g, |x, gg| if x > 0.0 { gg } else { 0.0 });
                    self.grads[a.0].add_assign(&d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let total = self.nodes[i].value.cols();
                    self.grads[a.0].add_assign(&g.slice_cols(0, ca));
                    self.grads[b.0].add_assign(&g.slice_cols(ca, total));
                }
                Op::SliceCols(a, start, end) => {
                    let ga = &mut self.grads[a.0];
                    for r in 0..g.rows() {
                        for (off, c) in (start..end).enumerate() {
                            let v = ga.at(r, c) + g.at(r, off);
                            ga.set(r, c, v);
                        }
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let ga = &mut self.grads[a.0];
                    for (off, r) in (start..end).enumerate() {
                        for c in 0..g.cols() {
                            let v = ga.at(r, c) + g.at(off, c);
                            ga.set(r, c, v);
                        }
                    }
                }
                Op::Reshape(a) => {
                    let (ra, ca) = self.nodes[a.0].value.shape();
                    self.grads[a.0].add_assign(&g.reshaped(ra, ca));
                }
                Op::ReduceSum(a) => {
                    let s = g.at(0, 0);
                    for v in self.grads[a.0].data_mut() {
                        *v += s;
                    }
                }
                Op::SoftSelect(a, mask) => {
                    self.grads[a.0].add_assign(&g.hadamard(&mask));
                }
                Op::Huber { pred, target, delta } => {
                    // d huber(e)/de = e on the quadratic branch, delta*sign(e) outside.
                    let pv = &self.nodes[pred.0].value;
                    let mut d = Matrix::zeros(pv.rows(), pv.cols());
                    for idx in 0..pv.len() {
                        let e = pv.data()[idx] - target.data()[idx];
                        let de = if e.abs() <= delta { e } else { delta * e.signum() };
                        d.data_mut()[idx] = g.data()[idx] * de;
                    }
                    self.grads[pred.0].add_assign(&d);
                }
            }
        }
        Ok(())
    }
}
