//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! records its inputs, and returns a [`NodeId`]. Because nodes can only refer
//! to earlier nodes, the tape is always in topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::matrix::{dot, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel};
use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Inputs above this value make `exp` report an overflow instead of producing `inf`.
pub const EXP_INPUT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// ELU with alpha fixed at 1.
    Elu,
    Exp,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Exp => x.exp(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Exp => y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Exp => "exp",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "exp" => Ok(Activation::Exp),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    PairProduct(NodeId, NodeId),
    Reshape(NodeId),
    GroupMean(NodeId, usize),
    GroupWeightedSum(NodeId, NodeId),
    ColumnMax(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    Pick(NodeId, usize, usize),
    /// Scalar-valued function with its local gradients precomputed at forward time.
    ScalarFn(Vec<(NodeId, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    param_order: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Loads a named parameter as a leaf; repeated loads return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push_unchecked(value, Op::Leaf);
        self.params.insert(name.to_string(), id);
        self.param_order.push((name.to_string(), id));
        Ok(id)
    }

    /// Parameters loaded into this graph, in load order.
    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.param_order.iter().map(|(n, id)| (n.as_str(), *id))
    }

    fn push_unchecked(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", va.cols()),
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_kernel(va, vb);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a * b^T`; used for weights stored in `W x` orientation.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("lhs cols == rhs cols ({})", va.cols()),
                format!("{:?} * {:?}^T", va.shape(), vb.shape()),
            ));
        }
        let out = matmul_nt_kernel(va, vb);
        self.push("matmul_nt", out, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "hadamard", |x, y| x * y)?;
        self.push("hadamard", out, Op::Hadamard(a, b))
    }

    fn zip(&self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, op)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Matrix::from_raw(va.rows(), va.cols(), data))
    }

    fn broadcast_row(&self, a: NodeId, row: NodeId, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape(
                op,
                format!("1x{}", va.cols()),
                format!("{}x{}", vr.rows(), vr.cols()),
            ));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vr.data()[i % cols]))
            .collect();
        Ok(Matrix::from_raw(va.rows(), cols, data))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let out = self.broadcast_row(a, row, "add_row", |x, r| x + r)?;
        self.push("add_row", out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` element-wise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let out = self.broadcast_row(a, row, "mul_row", |x, r| x * r)?;
        self.push("mul_row", out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        let va = self.value(a);
        if kind == Activation::Exp {
            if let Some(&input) = va.data().iter().find(|&&x| x > EXP_INPUT_LIMIT) {
                return Err(Error::Overflow {
                    op: "exp",
                    input,
                    limit: EXP_INPUT_LIMIT,
                });
            }
        }
        let out = va.map(|x| kind.apply(x));
        self.push(kind.name(), out, Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Tanh)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.value(a));
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization followed by the affine map `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let cols = vx.cols();
        for (name, v) in [("gain", vg), ("bias", vb)] {
            if v.shape() != (1, cols) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} 1x{cols}"),
                    format!("{}x{}", v.rows(), v.cols()),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Invalid("layer_norm eps must be positive".into()));
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * vg.data()[c] + vb.data()[c];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-pair Hadamard products: for `a` (`p x d`) and `b` (`q x d`) the output is
    /// `(p*q) x d` with row `t*q + i` equal to `a_t ⊙ b_i`.
    pub fn pair_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "pair_product",
                format!("{} columns", va.cols()),
                format!("{} columns", vb.cols()),
            ));
        }
        let d = va.cols();
        let mut data = Vec::with_capacity(va.rows() * vb.rows() * d);
        for ar in va.iter_rows() {
            for br in vb.iter_rows() {
                data.extend(ar.iter().zip(br).map(|(x, y)| x * y));
            }
        }
        let out = Matrix::from_raw(va.rows() * vb.rows(), d, data);
        self.push("pair_product", out, Op::PairProduct(a, b))
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", rows * cols),
                format!("{} elements", va.len()),
            ));
        }
        let out = Matrix::from_raw(rows, cols, va.data().to_vec());
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Means over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let va = self.value(a);
        if group == 0 || va.rows() % group != 0 {
            return Err(Error::shape(
                "group_mean",
                format!("row count divisible by {group}"),
                format!("{} rows", va.rows()),
            ));
        }
        let (groups, d) = (va.rows() / group, va.cols());
        let mut out = Matrix::zeros(groups, d);
        for g in 0..groups {
            let dst = out.row_mut(g);
            for r in g * group..(g + 1) * group {
                for (o, v) in dst.iter_mut().zip(va.row(r)) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= group as f64);
        }
        self.push("group_mean", out, Op::GroupMean(a, group))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let rows = self.value(a).rows();
        self.group_mean(a, rows)
    }

    /// For weights `w` (`p x q`) and stacked rows `x` (`(p*q) x d`), row `t` of the
    /// output is `sum_i w[t,i] * x[t*q + i]`.
    pub fn group_weighted_sum(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (vw, vx) = (self.value(w), self.value(x));
        let (p, q) = vw.shape();
        if vx.rows() != p * q {
            return Err(Error::shape(
                "group_weighted_sum",
                format!("{} stacked rows", p * q),
                format!("{} rows", vx.rows()),
            ));
        }
        let d = vx.cols();
        let mut out = Matrix::zeros(p, d);
        for t in 0..p {
            let dst = out.row_mut(t);
            for i in 0..q {
                let weight = vw.get(t, i);
                for (o, v) in dst.iter_mut().zip(vx.row(t * q + i)) {
                    *o += weight * v;
                }
            }
        }
        self.push("group_weighted_sum", out, Op::GroupWeightedSum(w, x))
    }

    /// Column-wise maximum over rows (max pooling); ties go to the earliest row.
    pub fn column_max(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::shape("column_max", "at least one row", "0 rows"));
        }
        let mut best = vec![0usize; va.cols()];
        let mut out = va.row(0).to_vec();
        for r in 1..va.rows() {
            for (c, &v) in va.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    best[c] = r;
                }
            }
        }
        let out = Matrix::from_raw(1, va.cols(), out);
        self.push("column_max", out, Op::ColumnMax(a, best))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{rows} rows"),
                format!("{} rows", self.value(bad).rows()),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::from_raw(rows, cols, data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).cols() != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("{cols} columns"),
                format!("{} columns", self.value(bad).cols()),
            ));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let out = Matrix::from_raw(rows, cols, data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{}", start + len),
                format!("{} columns", va.cols()),
            ));
        }
        let data = va
            .iter_rows()
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let out = Matrix::from_raw(va.rows(), len, data);
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{}", start + len),
                format!("{} rows", va.rows()),
            ));
        }
        let c = va.cols();
        let out = Matrix::from_raw(len, c, va.data()[start * c..(start + len) * c].to_vec());
        self.push("slice_rows", out, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        self.slice_rows(a, r, 1)
    }

    /// Embedding lookup: stacks `table[indices[k]]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * vt.cols());
        for &i in indices {
            if i >= vt.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    size: vt.rows(),
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let out = Matrix::from_raw(indices.len(), vt.cols(), data);
        self.push("gather_rows", out, Op::GatherRows(table, indices.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Matrix::from_raw(1, 1, vec![self.value(a).sum()]);
        self.push("sum", out, Op::Sum(a))
    }

    /// Selects a single element as a `1 x 1` node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let va = self.value(a);
        if r >= va.rows() || c >= va.cols() {
            return Err(Error::IndexOutOfRange {
                what: "matrix element",
                index: r * va.cols() + c,
                size: va.len(),
            });
        }
        let out = Matrix::from_raw(1, 1, vec![va.get(r, c)]);
        self.push("pick", out, Op::Pick(a, r, c))
    }

    /// Records a scalar function whose gradient with respect to each input is known.
    /// Each local gradient must match its input's shape.
    pub fn scalar_fn(&mut self, name: &'static str, value: f64, local_grads: Vec<(NodeId, Matrix)>) -> Result<NodeId> {
        for (id, g) in &local_grads {
            self.value(*id).same_shape(g, name)?;
            if !g.is_finite() {
                return Err(Error::NonFinite { op: name });
            }
        }
        let out = Matrix::from_raw(1, 1, vec![value]);
        self.push(name, out, Op::ScalarFn(local_grads))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, matmul_nt_kernel(&g, vb));
                    accumulate(&mut grads, *b, matmul_tn_kernel(va, &g));
                }
                Op::MatMulNt(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, matmul_kernel(&g, vb));
                    accumulate(&mut grads, *b, matmul_tn_kernel(&g, va));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = zip_with(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_with(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let grow = column_sums(&g);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, grow);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (self.value(*a), self.value(*row));
                    let cols = va.cols();
                    let mut ga = g.clone();
                    let mut grow = Matrix::zeros(1, cols);
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        let c = i % cols;
                        grow.data_mut()[c] += *v * va.data()[i];
                        *v *= vr.data()[c];
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, grow);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, g.map(|v| v * factor));
                }
                Op::Act(a, kind) => {
                    let va = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(out.data()))
                        .map(|(gv, (&x, &y))| gv * kind.derivative(x, y))
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_raw(g.rows(), g.cols(), data));
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let s = dot(g.row(r), y);
                        for (v, &yv) in ga.row_mut(r).iter_mut().zip(y) {
                            *v = yv * (*v - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        for (v, &lp) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                            *v -= lp.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gain);
                    let cols = g.cols();
                    let mut gx = Matrix::zeros(g.rows(), cols);
                    let mut ggain = Matrix::zeros(1, cols);
                    let gbias = column_sums(&g);
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let dxhat: Vec<f64> = gr.iter().zip(vg.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xr) / cols as f64;
                        for (c, v) in gx.row_mut(r).iter_mut().enumerate() {
                            *v = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                        for (c, v) in ggain.data_mut().iter_mut().enumerate() {
                            *v += gr[c] * xr[c];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::PairProduct(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let q = vb.rows();
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    for t in 0..va.rows() {
                        for i in 0..q {
                            let gr = g.row(t * q + i);
                            for (c, &gv) in gr.iter().enumerate() {
                                ga.data_mut()[t * va.cols() + c] += gv * vb.get(i, c);
                                gb.data_mut()[i * vb.cols() + c] += gv * va.get(t, c);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::from_raw(r, c, g.into_data()));
                }
                Op::GroupMean(a, group) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for row in 0..r {
                        for (v, gv) in ga.row_mut(row).iter_mut().zip(g.row(row / group)) {
                            *v = gv / *group as f64;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupWeightedSum(w, x) => {
                    let (vw, vx) = (self.value(*w), self.value(*x));
                    let (p, q) = vw.shape();
                    let mut gw = Matrix::zeros(p, q);
                    let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                    for t in 0..p {
                        let gr = g.row(t);
                        for i in 0..q {
                            gw.set(t, i, dot(gr, vx.row(t * q + i)));
                            let weight = vw.get(t, i);
                            for (v, gv) in gx.row_mut(t * q + i).iter_mut().zip(gr) {
                                *v = weight * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ColumnMax(a, best) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (col, &row) in best.iter().enumerate() {
                        ga.set(row, col, g.data()[col]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let data = (0..r)
                            .flat_map(|row| g.row(row)[offset..offset + c].iter().copied())
                            .collect();
                        accumulate(&mut grads, p, Matrix::from_raw(r, c, data));
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let (r, c) = self.shape(p);
                        accumulate(&mut grads, p, Matrix::from_raw(r, c, g.data()[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(table, indices) => {
                    let (r, c) = self.shape(*table);
                    let mut gt = Matrix::zeros(r, c);
                    for (k, &i) in indices.iter().enumerate() {
                        for (v, gv) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *v += gv;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::Pick(a, r, c) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    ga.set(*r, *c, g.data()[0]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScalarFn(locals) => {
                    let upstream = g.data()[0];
                    for (id, local) in locals {
                        accumulate(&mut grads, *id, local.map(|v| v * upstream));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Untaped, max-shifted row softmax.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Gradients produced by [`Graph::backward`]. Only leaves retain their gradient.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of every parameter loaded in `graph` into `store`.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) -> Result<()> {
        for (name, id) in graph.params() {
            if let Some(g) = self.get(id) {
                let p = store.param_mut(name)?;
                for (dst, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst += v;
                }
            }
        }
        Ok(())
    }
}
