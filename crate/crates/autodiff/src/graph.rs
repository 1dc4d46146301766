//! Define-then-run compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] records symbolic nodes. [`Graph::forward`] binds parameters
//! and named inputs, evaluates every node in insertion order (which is a
//! topological order by construction) and caches the values;
//! [`Graph::backward`] then propagates a seed from a sink back to every
//! unfrozen parameter leaf.
//!
//! Most ops treat their operands as matrices whose last axis is the column
//! axis. Reductions produce rank-0 tensors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{dot, kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    /// `scale * x + shift`
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    /// Adds a length-`cols` bias to every row.
    AddRow(NodeId, NodeId),
    /// Multiplies row `i` of `x` by `col[i]`; `col` has one column.
    MulCol {
        col: NodeId,
        x: NodeId,
    },
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// `out[r, c] = query[r] · table[ids[r * cols + c]]`
    GatherDot {
        query: NodeId,
        table: NodeId,
        ids: Vec<usize>,
        cols: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    RowSoftmax(NodeId),
    /// Row-wise dot products, one column out.
    RowDot(NodeId, NodeId),
    /// `out[b, t] = query[b] · keys[t * B + b]` over `blocks` stacked blocks.
    BlockDot {
        query: NodeId,
        keys: NodeId,
        blocks: usize,
    },
    /// `out[b] = Σ_t weights[b, t] · values[t * B + b]`
    BlockMix {
        weights: NodeId,
        values: NodeId,
    },
    Dropout {
        x: NodeId,
        rate: f64,
        seed: u64,
    },
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Affine { .. } => "affine",
            Op::AddRow(..) => "add_row",
            Op::MulCol { .. } => "mul_col",
            Op::MatMul(..) => "matmul",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Exp(_) => "exp",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gather { .. } => "gather",
            Op::GatherDot { .. } => "gather_dot",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowDot(..) => "row_dot",
            Op::BlockDot { .. } => "block_dot",
            Op::BlockMix { .. } => "block_mix",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::RowDot(a, b) => vec![*a, *b],
            Op::MulCol { col, x } => vec![*col, *x],
            Op::Neg(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::Exp(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::RowSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Affine { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::GatherDot { query, table, .. } => vec![*query, *table],
            Op::ConcatCols(xs) => xs.clone(),
            Op::BlockDot { query, keys, .. } => vec![*query, *keys],
            Op::BlockMix { weights, values } => vec![*weights, *values],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// A compute graph. Build it with the op methods, run [`Graph::forward`],
/// then read values or call [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    values: Vec<Option<Tensor>>,
    /// Dropout masks from the last forward, keyed by node index.
    masks: HashMap<usize, Vec<f64>>,
    needs_grad: Vec<bool>,
    frozen: Vec<bool>,
}

impl Graph {
    /// `training` switches dropout on; evaluation graphs treat it as identity.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            values: Vec::new(),
            masks: HashMap::new(),
            needs_grad: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match (&node.label, &node.op) {
            (Some(l), op) => format!("#{} {} '{}'", id.0, op.name(), l),
            (None, Op::Param(n)) => format!("#{} param '{}'", id.0, n),
            (None, Op::Input(n)) => format!("#{} input '{}'", id.0, n),
            (None, op) => format!("#{} {}", id.0, op.name()),
        }
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Neg(x))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(x, bias))
    }

    pub fn mul_col(&mut self, col: NodeId, x: NodeId) -> NodeId {
        self.push(Op::MulCol { col, x })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// Embedding lookup: rows of `table` in the order of `ids`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Gather { table, ids })
    }

    /// Scores `cols` table rows per query row; `ids` is row-major `[rows, cols]`.
    pub fn gather_dot(&mut self, query: NodeId, table: NodeId, ids: Vec<usize>, cols: usize) -> NodeId {
        self.push(Op::GatherDot {
            query,
            table,
            ids,
            cols,
        })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::RowSoftmax(x))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::RowDot(a, b))
    }

    /// Dot products of each query row against the matching row of every
    /// stacked key block. `keys` has `blocks * rows(query)` rows.
    pub fn block_dot(&mut self, query: NodeId, keys: NodeId, blocks: usize) -> NodeId {
        self.push(Op::BlockDot {
            query,
            keys,
            blocks,
        })
    }

    /// Weighted sum over stacked value blocks; `weights` is `[rows, blocks]`.
    pub fn block_mix(&mut self, weights: NodeId, values: NodeId) -> NodeId {
        self.push(Op::BlockMix { weights, values })
    }

    /// Inverted dropout: keeps each entry with probability `1 - rate` and
    /// rescales by `1 / (1 - rate)`. Identity in evaluation graphs.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> NodeId {
        if !self.training || rate <= 0.0 {
            return x;
        }
        self.push(Op::Dropout { x, rate, seed })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// Value of a node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::NotEvaluated)
    }

    /// Evaluates every node. Parameters are read from `params`; `inputs` binds
    /// the named input placeholders.
    pub fn forward(&mut self, params: &ParamStore, inputs: &HashMap<String, Tensor>) -> Result<()> {
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(n);
        let mut needs_grad = vec![false; n];
        let mut frozen = vec![false; n];
        self.masks.clear();
        for i in 0..n {
            let op = &self.nodes[i].op;
            let value = match op {
                Op::Param(name) => {
                    let t = params
                        .get(name)
                        .ok_or_else(|| AutodiffError::UnknownParameter(name.clone()))?;
                    frozen[i] = params.is_frozen(name);
                    needs_grad[i] = !frozen[i];
                    t.clone()
                }
                Op::Input(name) => inputs
                    .get(name)
                    .cloned()
                    .ok_or_else(|| AutodiffError::UnboundInput(name.clone()))?,
                Op::Constant(t) => t.clone(),
                op => {
                    needs_grad[i] = op.parents().iter().any(|p| needs_grad[p.0]);
                    self.eval_op(i, &values)?
                }
            };
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: self.describe(NodeId(i)),
                });
            }
            values.push(Some(value));
        }
        self.values = values;
        self.needs_grad = needs_grad;
        self.frozen = frozen;
        Ok(())
    }

    fn shape_err(&self, i: usize, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.describe(NodeId(i)),
            detail,
        }
    }

    fn eval_op(&mut self, i: usize, values: &[Option<Tensor>]) -> Result<Tensor> {
        let v = |id: &NodeId| values[id.0].as_ref().expect("parents precede children");
        let op = self.nodes[i].op.clone();
        let out = match &op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (v(a), v(b));
                if x.shape() != y.shape() {
                    return Err(self.shape_err(i, format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let data: Vec<f64> = match op {
                    Op::Add(..) => x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect(),
                    Op::Sub(..) => x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect(),
                    _ => x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
                };
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::Neg(x) => v(x).map(|a| -a),
            Op::Affine { x, scale, shift } => {
                let (s, t) = (*scale, *shift);
                v(x).map(|a| s * a + t)
            }
            Op::AddRow(x, b) => {
                let (x, b) = (v(x), v(b));
                if b.len() != x.cols() {
                    return Err(self.shape_err(i, format!("bias {:?} for {:?}", b.shape(), x.shape())));
                }
                let mut out = x.clone();
                let c = x.cols();
                for row in out.data_mut().chunks_mut(c.max(1)) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                out
            }
            Op::MulCol { col, x } => {
                let (c, x) = (v(col), v(x));
                if c.len() != x.rows() {
                    return Err(self.shape_err(i, format!("column {:?} for {:?}", c.shape(), x.shape())));
                }
                let mut out = x.clone();
                let w = x.cols();
                for (r, row) in out.data_mut().chunks_mut(w.max(1)).enumerate() {
                    let s = c.data()[r];
                    row.iter_mut().for_each(|o| *o *= s);
                }
                out
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.shape_err(i, format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; n * m];
                kernels::matmul_nn(a.data(), b.data(), &mut out, n, k, m);
                Tensor::new(vec![n, m], out)?
            }
            Op::Sigmoid(x) => v(x).map(sigmoid),
            Op::LogSigmoid(x) => v(x).map(log_sigmoid),
            Op::Exp(x) => v(x).map(f64::exp),
            Op::Tanh(x) => v(x).map(f64::tanh),
            Op::Relu(x) => v(x).map(|a| a.max(0.0)),
            Op::Gather { table, ids } => {
                let t = v(table);
                let (rows, c) = (t.rows(), t.cols());
                let mut out = Vec::with_capacity(ids.len() * c);
                for &id in ids {
                    if id >= rows {
                        return Err(AutodiffError::IndexOutOfRange {
                            node: self.describe(NodeId(i)),
                            index: id,
                            rows,
                        });
                    }
                    out.extend_from_slice(t.row(id));
                }
                Tensor::new(vec![ids.len(), c], out)?
            }
            Op::GatherDot {
                query,
                table,
                ids,
                cols,
            } => {
                let (q, t) = (v(query), v(table));
                if q.cols() != t.cols() || ids.len() != q.rows() * cols {
                    return Err(self.shape_err(
                        i,
                        format!("query {:?}, table {:?}, {} ids", q.shape(), t.shape(), ids.len()),
                    ));
                }
                let rows = t.rows();
                let mut out = Vec::with_capacity(ids.len());
                for (k, &id) in ids.iter().enumerate() {
                    if id >= rows {
                        return Err(AutodiffError::IndexOutOfRange {
                            node: self.describe(NodeId(i)),
                            index: id,
                            rows,
                        });
                    }
                    out.push(dot(q.row(k / cols), t.row(id)));
                }
                Tensor::new(vec![q.rows(), *cols], out)?
            }
            Op::ConcatCols(parts) => {
                let rows = v(&parts[0]).rows();
                if parts.iter().any(|p| v(p).rows() != rows) {
                    let shapes: Vec<_> = parts.iter().map(|p| v(p).shape().to_vec()).collect();
                    return Err(self.shape_err(i, format!("row counts differ: {shapes:?}")));
                }
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(v(p).row(r));
                    }
                }
                Tensor::new(vec![rows, total], out)?
            }
            Op::SliceRows { x, start, len } => {
                let x = v(x);
                if start + len > x.rows() {
                    return Err(self.shape_err(i, format!("rows {start}..{} of {:?}", start + len, x.shape())));
                }
                let c = x.cols();
                Tensor::new(vec![*len, c], x.data()[start * c..(start + len) * c].to_vec())?
            }
            Op::SliceCols { x, start, len } => {
                let x = v(x);
                if start + len > x.cols() {
                    return Err(self.shape_err(i, format!("cols {start}..{} of {:?}", start + len, x.shape())));
                }
                let mut out = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    out.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                Tensor::new(vec![x.rows(), *len], out)?
            }
            Op::RowSoftmax(x) => {
                let mut out = v(x).clone();
                let c = out.cols().max(1);
                for row in out.data_mut().chunks_mut(c) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for a in row.iter_mut() {
                        *a = (*a - max).exp();
                        total += *a;
                    }
                    row.iter_mut().for_each(|a| *a /= total);
                }
                out
            }
            Op::RowDot(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(self.shape_err(i, format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                let out: Vec<f64> = (0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect();
                Tensor::new(vec![a.rows(), 1], out)?
            }
            Op::BlockDot {
                query,
                keys,
                blocks,
            } => {
                let (q, k) = (v(query), v(keys));
                let b = q.rows();
                if k.cols() != q.cols() || k.rows() != b * blocks {
                    return Err(self.shape_err(i, format!("query {:?}, keys {:?}, {blocks} blocks", q.shape(), k.shape())));
                }
                let mut out = vec![0.0; b * blocks];
                for t in 0..*blocks {
                    for r in 0..b {
                        out[r * blocks + t] = dot(q.row(r), k.row(t * b + r));
                    }
                }
                Tensor::new(vec![b, *blocks], out)?
            }
            Op::BlockMix { weights, values } => {
                let (w, vals) = (v(weights), v(values));
                let (b, blocks) = (w.rows(), w.cols());
                if vals.rows() != b * blocks {
                    return Err(self.shape_err(i, format!("weights {:?}, values {:?}", w.shape(), vals.shape())));
                }
                let d = vals.cols();
                let mut out = vec![0.0; b * d];
                for r in 0..b {
                    let orow = &mut out[r * d..(r + 1) * d];
                    for t in 0..blocks {
                        let wt = w.data()[r * blocks + t];
                        for (o, x) in orow.iter_mut().zip(vals.row(t * b + r)) {
                            *o += wt * x;
                        }
                    }
                }
                Tensor::new(vec![b, d], out)?
            }
            Op::Dropout { x, rate, seed } => {
                let x = v(x);
                let keep = 1.0 - rate;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                self.masks.insert(i, mask);
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
            Op::Mean(x) => {
                let x = v(x);
                Tensor::scalar(x.sum() / x.len().max(1) as f64)
            }
        };
        Ok(out)
    }

    /// Reverse-mode pass from `sink` seeded with `seed` (same shape as the
    /// sink's value). Returns gradients for every unfrozen parameter the sink
    /// depends on.
    pub fn backward(&self, sink: NodeId, seed: &Tensor) -> Result<Gradients> {
        let sink_value = self.value(sink)?;
        if sink_value.shape() != seed.shape() {
            return Err(AutodiffError::SeedShape {
                seed: seed.shape().to_vec(),
                sink: sink_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; sink.0 + 1];
        grads[sink.0] = Some(seed.clone());
        let mut out = Gradients::new();
        for i in (0..=sink.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param(name) => {
                    out.accumulate(name, &g);
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("forward ran")
    }

    fn propagate(&self, op: &Op, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |id: &NodeId| self.needs_grad[id.0];
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                if wants(a) {
                    add_to(grads, *a, g.clone());
                }
                if wants(b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_to(grads, *a, g.clone());
                }
                if wants(b) {
                    add_to(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    add_to(grads, *a, zip_map(g, self.val(*b), |x, y| x * y));
                }
                if wants(b) {
                    add_to(grads, *b, zip_map(g, self.val(*a), |x, y| x * y));
                }
            }
            Op::Neg(x) => add_to(grads, *x, g.map(|a| -a)),
            Op::Affine { x, scale, .. } => {
                let s = *scale;
                add_to(grads, *x, g.map(|a| a * s));
            }
            Op::AddRow(x, b) => {
                if wants(x) {
                    add_to(grads, *x, g.clone());
                }
                if wants(b) {
                    let bias = self.val(*b);
                    let c = g.cols().max(1);
                    let mut acc = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    add_to(grads, *b, Tensor::new(bias.shape().to_vec(), acc).expect("bias shape"));
                }
            }
            Op::MulCol { col, x } => {
                let (cv, xv) = (self.val(*col), self.val(*x));
                let w = xv.cols().max(1);
                if wants(col) {
                    let d: Vec<f64> = g
                        .data()
                        .chunks(w)
                        .zip(xv.data().chunks(w))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    add_to(grads, *col, Tensor::new(cv.shape().to_vec(), d).expect("col shape"));
                }
                if wants(x) {
                    let mut d = g.clone();
                    for (r, row) in d.data_mut().chunks_mut(w).enumerate() {
                        let s = cv.data()[r];
                        row.iter_mut().for_each(|o| *o *= s);
                    }
                    add_to(grads, *x, d);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(a) {
                    let mut d = vec![0.0; n * k];
                    kernels::matmul_nt(g.data(), bv.data(), &mut d, n, m, k);
                    add_to(grads, *a, Tensor::new(vec![n, k], d).expect("shape"));
                }
                if wants(b) {
                    let mut d = vec![0.0; k * m];
                    kernels::matmul_tn(av.data(), g.data(), &mut d, n, k, m);
                    add_to(grads, *b, Tensor::new(vec![k, m], d).expect("shape"));
                }
            }
            Op::Sigmoid(x) => {
                let y = self.val(NodeId(i));
                add_to(grads, *x, zip_map(g, y, |gv, s| gv * s * (1.0 - s)));
            }
            Op::LogSigmoid(x) => {
                let xv = self.val(*x);
                add_to(grads, *x, zip_map(g, xv, |gv, a| gv * sigmoid(-a)));
            }
            Op::Exp(x) => {
                let y = self.val(NodeId(i));
                add_to(grads, *x, zip_map(g, y, |gv, e| gv * e));
            }
            Op::Tanh(x) => {
                let y = self.val(NodeId(i));
                add_to(grads, *x, zip_map(g, y, |gv, t| gv * (1.0 - t * t)));
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                add_to(grads, *x, zip_map(g, xv, |gv, a| if a > 0.0 { gv } else { 0.0 }));
            }
            Op::Gather { table, ids } => {
                let t = self.val(*table);
                let c = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (o, s) in d.row_mut(id).iter_mut().zip(src) {
                        *o += s;
                    }
                }
                add_to(grads, *table, d);
            }
            Op::GatherDot {
                query,
                table,
                ids,
                cols,
            } => {
                let (q, t) = (self.val(*query), self.val(*table));
                let d = q.cols();
                if wants(query) {
                    let mut dq = Tensor::zeros(q.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        let gv = g.data()[k];
                        if gv == 0.0 {
                            continue;
                        }
                        let row = &mut dq.data_mut()[(k / cols) * d..(k / cols + 1) * d];
                        for (o, tv) in row.iter_mut().zip(t.row(id)) {
                            *o += gv * tv;
                        }
                    }
                    add_to(grads, *query, dq);
                }
                if wants(table) {
                    let mut dt = Tensor::zeros(t.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        let gv = g.data()[k];
                        if gv == 0.0 {
                            continue;
                        }
                        let qrow = q.row(k / cols);
                        for (o, qv) in dt.row_mut(id).iter_mut().zip(qrow) {
                            *o += gv * qv;
                        }
                    }
                    add_to(grads, *table, dt);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let c = pv.cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        add_to(grads, *p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                add_to(grads, *x, d);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val(*x);
                let mut d = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    d.row_mut(r)[*start..start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                add_to(grads, *x, d);
            }
            Op::RowSoftmax(x) => {
                let y = self.val(NodeId(i));
                let c = y.cols().max(1);
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let inner = dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - inner)));
                }
                add_to(grads, *x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let c = av.cols().max(1);
                let scaled = |other: &Tensor| {
                    let mut d = other.clone();
                    for (r, row) in d.data_mut().chunks_mut(c).enumerate() {
                        let s = g.data()[r];
                        row.iter_mut().for_each(|o| *o *= s);
                    }
                    d
                };
                if wants(a) {
                    add_to(grads, *a, scaled(bv));
                }
                if wants(b) {
                    add_to(grads, *b, scaled(av));
                }
            }
            Op::BlockDot {
                query,
                keys,
                blocks,
            } => {
                let (q, k) = (self.val(*query), self.val(*keys));
                let b = q.rows();
                let d = q.cols();
                if wants(query) {
                    let mut dq = Tensor::zeros(q.shape());
                    for r in 0..b {
                        let row = &mut dq.data_mut()[r * d..(r + 1) * d];
                        for t in 0..*blocks {
                            let gv = g.data()[r * blocks + t];
                            for (o, kv) in row.iter_mut().zip(k.row(t * b + r)) {
                                *o += gv * kv;
                            }
                        }
                    }
                    add_to(grads, *query, dq);
                }
                if wants(keys) {
                    let mut dk = Tensor::zeros(k.shape());
                    for t in 0..*blocks {
                        for r in 0..b {
                            let gv = g.data()[r * blocks + t];
                            for (o, qv) in dk.row_mut(t * b + r).iter_mut().zip(q.row(r)) {
                                *o = gv * qv;
                            }
                        }
                    }
                    add_to(grads, *keys, dk);
                }
            }
            Op::BlockMix { weights, values } => {
                let (w, vals) = (self.val(*weights), self.val(*values));
                let (b, blocks) = (w.rows(), w.cols());
                let d = vals.cols();
                if wants(weights) {
                    let mut dw = vec![0.0; b * blocks];
                    for r in 0..b {
                        let grow = &g.data()[r * d..(r + 1) * d];
                        for t in 0..blocks {
                            dw[r * blocks + t] = dot(grow, vals.row(t * b + r));
                        }
                    }
                    add_to(grads, *weights, Tensor::new(w.shape().to_vec(), dw).expect("shape"));
                }
                if wants(values) {
                    let mut dv = Tensor::zeros(vals.shape());
                    for t in 0..blocks {
                        for r in 0..b {
                            let wt = w.data()[r * blocks + t];
                            let grow = &g.data()[r * d..(r + 1) * d];
                            for (o, gv) in dv.row_mut(t * b + r).iter_mut().zip(grow) {
                                *o = wt * gv;
                            }
                        }
                    }
                    add_to(grads, *values, dv);
                }
            }
            Op::Dropout { x, .. } => {
                let mask = &self.masks[&i];
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                add_to(grads, *x, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum(x) => {
                let xv = self.val(*x);
                add_to(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                add_to(grads, *x, Tensor::full(xv.shape(), g.data()[0] / xv.len().max(1) as f64));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` in the branch form `min(x, 0) - ln(1 + e^{-|x|})`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(g: &mut Graph, params: &ParamStore) {
        g.forward(params, &HashMap::new()).unwrap();
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        run(&mut g, &ParamStore::new());
        assert_eq!(g.value(y).unwrap().item(), Some(0.5));
    }

    #[test]
    fn log_sigmoid_is_stable_far_left() {
        assert!((log_sigmoid(-50.0) - (-50.0 - (-50.0f64).exp())).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut g = Graph::new(false);
        let x = g.param("x");
        let y = g.sigmoid(x);
        run(&mut g, &p);
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), Some(0.25));
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new(false);
        let x = g.param("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        run(&mut g, &p);
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::scalar(1.0));
        assert!(matches!(
            g.backward(x, &Tensor::scalar(1.0)),
            Err(AutodiffError::NotEvaluated)
        ));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::new(false);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let m = g.matmul(a, b);
        g.label(m, "bad.product");
        let err = g.forward(&ParamStore::new(), &HashMap::new()).unwrap_err();
        assert!(err.to_string().contains("bad.product"), "{err}");
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut g = Graph::new(false);
        let a = g.constant(Tensor::scalar(1000.0));
        let e = g.exp(a);
        let err = g.forward(&ParamStore::new(), &HashMap::new()).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { .. }));
        assert!(err.to_string().contains(&format!("#{}", e.index())));
    }

    #[test]
    fn seed_shape_checked() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new(false);
        let x = g.param("x");
        run(&mut g, &p);
        assert!(matches!(
            g.backward(x, &Tensor::scalar(1.0)),
            Err(AutodiffError::SeedShape { .. })
        ));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(2.0)).unwrap();
        p.insert("b", Tensor::scalar(3.0)).unwrap();
        p.set_frozen("b", true).unwrap();
        let mut g = Graph::new(false);
        let a = g.param("a");
        let b = g.param("b");
        let y = g.mul(a, b);
        run(&mut g, &p);
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("a").unwrap().item(), Some(3.0));
        assert!(grads.get("b").is_none());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::full(&[3, 3], 2.0));
        let d = g.dropout(x, 0.5, 1);
        assert_eq!(d, x);
    }

    #[test]
    fn gather_rows_in_order() {
        let mut g = Graph::new(false);
        let t = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let r = g.gather(t, vec![0, 0, 1]);
        run(&mut g, &ParamStore::new());
        assert_eq!(g.value(r).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_out_of_range_errors() {
        let mut g = Graph::new(false);
        let t = g.constant(Tensor::zeros(&[2, 2]));
        g.gather(t, vec![5]);
        let err = g.forward(&ParamStore::new(), &HashMap::new()).unwrap_err();
        assert!(matches!(err, AutodiffError::IndexOutOfRange { index: 5, .. }));
    }
}
