//! Reverse-mode automatic differentiation over [`Tensor2D`] values.
//!
//! Operations are recorded on a flat tape; [`Tape::backward`] walks it in
//! reverse and accumulates exact gradients for every named leaf. The tape is
//! rebuilt per step, so no stale state survives between optimizer updates.

use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::graph::CsrAdjacency;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{self, Tensor2D};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Differentiable input; `Some(name)` ties it to a parameter.
    Leaf(Option<String>),
    /// Non-differentiable input (data, masks); gradients stop here.
    Constant,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Log(NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SoftmaxRows(NodeId),
    NllFromLogits(NodeId, Vec<usize>),
    /// Product with a constant symmetric sparse matrix (the GCN adjacency).
    SpmmSym(Rc<CsrAdjacency>, NodeId),
}

struct Node {
    value: Tensor2D,
    op: Op,
}

/// Recording tape. One tape per training step / evaluation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    /// Registers a differentiable unnamed leaf.
    pub fn leaf(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf(None))
    }

    /// Registers a differentiable leaf whose gradient is reported under `name`.
    pub fn named_leaf(&mut self, name: &str, value: Tensor2D) -> NodeId {
        self.push(value, Op::Leaf(Some(name.to_string())))
    }

    /// Registers a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Stages every parameter of the store as a named leaf.
    pub fn stage_params(&mut self, store: &ParamStore) -> StagedParams {
        let mut entries = Vec::new();
        for (name, tensor) in store.iter() {
            let id = self.named_leaf(name, tensor.clone());
            entries.push((name.to_string(), id));
        }
        StagedParams { entries }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = tensor::add_bias_row(self.value(a), self.value(bias))?;
        Ok(self.push(value, Op::AddBiasRow(a, bias)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul_elem(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MulElem(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::relu(self.value(a));
        Ok(self.push(value, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::sigmoid(self.value(a));
        Ok(self.push(value, Op::Sigmoid(a)))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::log_sigmoid(self.value(a));
        Ok(self.push(value, Op::LogSigmoid(a)))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::log_elem(self.value(a))?;
        Ok(self.push(value, Op::Log(a)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = tensor::scale(self.value(a), c)?;
        Ok(self.push(value, Op::Scale(a, c)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::mean_rows(self.value(a))?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::sum_all(self.value(a))?;
        Ok(self.push(value, Op::SumAll(a)))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = tensor::gather_rows(self.value(a), indices)?;
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Per-row negative log-likelihood of `labels` from logits; `n x 1`.
    pub fn nll_from_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let value = tensor::nll_from_logits(self.value(logits), labels)?;
        Ok(self.push(value, Op::NllFromLogits(logits, labels.to_vec())))
    }

    /// Multiplies by a constant symmetric normalized adjacency.
    pub fn spmm_sym(&mut self, adj: &Rc<CsrAdjacency>, x: NodeId) -> Result<NodeId> {
        let value = adj.spmm(self.value(x))?;
        Ok(self.push(value, Op::SpmmSym(Rc::clone(adj), x)))
    }

    /// Gradients of a scalar node with respect to every named leaf.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Result<Gradients> {
        self.backward_weighted(&[(root, 1.0)], store)
    }

    /// Gradients of `sum_k w_k * root_k` for scalar roots, in one sweep.
    pub fn backward_weighted(
        &self,
        roots: &[(NodeId, f64)],
        store: &ParamStore,
    ) -> Result<Gradients> {
        let mut adjoint: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(root, weight) in roots {
            let value = &self.nodes[root.0].value;
            if value.shape() != (1, 1) {
                return Err(CoreError::ShapeMismatch {
                    op: "backward",
                    lhs_rows: value.rows(),
                    lhs_cols: value.cols(),
                    rhs_rows: 1,
                    rhs_cols: 1,
                });
            }
            add_into(&mut adjoint[root.0], &Tensor2D::scalar(weight));
        }
        for idx in (0..self.nodes.len()).rev() {
            let grad = match adjoint[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &grad, &mut adjoint)?;
            adjoint[idx] = Some(grad);
        }
        let mut grads = Gradients::zeros_like(store);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(name)) = &node.op {
                if let Some(g) = &adjoint[idx] {
                    grads.accumulate(name, g)?;
                }
            }
        }
        if !grads.is_finite() {
            return Err(CoreError::NonFinite { op: "backward" });
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        idx: usize,
        grad: &Tensor2D,
        adjoint: &mut [Option<Tensor2D>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::Matmul(a, b) => {
                let da = tensor::matmul_nt(grad, self.value(*b))?;
                let db = tensor::matmul_tn(self.value(*a), grad)?;
                add_into(&mut adjoint[a.0], &da);
                add_into(&mut adjoint[b.0], &db);
            }
            Op::Add(a, b) => {
                add_into(&mut adjoint[a.0], grad);
                add_into(&mut adjoint[b.0], grad);
            }
            Op::AddBiasRow(a, bias) => {
                add_into(&mut adjoint[a.0], grad);
                // Bias gradient is the column sum of the incoming gradient.
                let cols = grad.cols();
                let mut db = Tensor2D::zeros(1, cols);
                for i in 0..grad.rows() {
                    for (j, &g) in grad.row(i).iter().enumerate() {
                        db.data_mut()[j] += g;
                    }
                }
                add_into(&mut adjoint[bias.0], &db);
            }
            Op::MulElem(a, b) => {
                let da = tensor::mul_elem(grad, self.value(*b))?;
                let db = tensor::mul_elem(grad, self.value(*a))?;
                add_into(&mut adjoint[a.0], &da);
                add_into(&mut adjoint[b.0], &db);
            }
            Op::Relu(a) => {
                let input = self.value(*a);
                let mut da = grad.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::Sigmoid(a) => {
                let s = &node.value;
                let mut da = grad.clone();
                for (g, &sv) in da.data_mut().iter_mut().zip(s.data()) {
                    *g *= sv * (1.0 - sv);
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::LogSigmoid(a) => {
                // d/dx log sigmoid(x) = sigmoid(-x)
                let input = self.value(*a);
                let mut da = grad.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(input.data()) {
                    *g *= fmath::sigmoid(-x);
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::Log(a) => {
                let input = self.value(*a);
                let mut da = grad.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(input.data()) {
                    *g /= x;
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::Scale(a, c) => {
                let da = tensor::scale(grad, *c)?;
                add_into(&mut adjoint[a.0], &da);
            }
            Op::ConcatCols(a, b) => {
                let (ra, ca) = self.value(*a).shape();
                let cb = self.value(*b).cols();
                let mut da = Tensor2D::zeros(ra, ca);
                let mut db = Tensor2D::zeros(ra, cb);
                for i in 0..ra {
                    let g_row = grad.row(i);
                    da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&g_row[..ca]);
                    db.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&g_row[ca..]);
                }
                add_into(&mut adjoint[a.0], &da);
                add_into(&mut adjoint[b.0], &db);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let inv = 1.0 / rows as f64;
                let mut da = Tensor2D::zeros(rows, cols);
                for i in 0..rows {
                    for j in 0..cols {
                        da.set(i, j, grad.get(0, j) * inv);
                    }
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                let g = grad.item()?;
                let mut da = Tensor2D::zeros(rows, cols);
                for v in da.data_mut() {
                    *v = g;
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::GatherRows(a, indices) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Tensor2D::zeros(rows, cols);
                for (out_row, &src) in indices.iter().enumerate() {
                    let g_row = grad.row(out_row);
                    let slot = &mut da.data_mut()[src * cols..(src + 1) * cols];
                    for (s, &g) in slot.iter_mut().zip(g_row) {
                        *s += g;
                    }
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::SoftmaxRows(a) => {
                // g_in = s .* (g - sum(g .* s)) per row
                let s = &node.value;
                let mut da = Tensor2D::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let s_row = s.row(i);
                    let g_row = grad.row(i);
                    let dot: f64 = s_row.iter().zip(g_row).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..s.cols() {
                        da.set(i, j, s_row[j] * (g_row[j] - dot));
                    }
                }
                add_into(&mut adjoint[a.0], &da);
            }
            Op::NllFromLogits(logits, labels) => {
                // d nll_i / d logits_i = softmax(logits_i) - onehot(label_i)
                let probs = tensor::softmax_rows(self.value(*logits))?;
                let mut da = probs;
                let cols = da.cols();
                for (i, &label) in labels.iter().enumerate() {
                    let g = grad.get(i, 0);
                    let row = &mut da.data_mut()[i * cols..(i + 1) * cols];
                    for (j, v) in row.iter_mut().enumerate() {
                        let target = if j == label { 1.0 } else { 0.0 };
                        *v = (*v - target) * g;
                    }
                }
                add_into(&mut adjoint[logits.0], &da);
            }
            Op::SpmmSym(adj, x) => {
                // Adjacency is symmetric, so the transpose product is itself.
                let dx = adj.spmm(grad)?;
                add_into(&mut adjoint[x.0], &dx);
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into(slot: &mut Option<Tensor2D>, delta: &Tensor2D) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta.clone()),
    }
}

/// Parameter leaves staged on a tape, by name.
pub struct StagedParams {
    entries: Vec<(String, NodeId)>,
}

impl StagedParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| CoreError::ParamStore(alloc::format!("parameter '{name}' not staged")))
    }
}
