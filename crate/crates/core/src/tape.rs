//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`], holding its forward value
//! and enough context to push gradients to its inputs. [`Tape::backward`]
//! walks the nodes in exact reverse execution order and accumulates gradients
//! additively, so a value that feeds several operations receives the sum of
//! their contributions.
//!
//! ```
//! use darer_core::tape::Tape;
//! use darer_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Log { x: Var, floor: f64 },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    GatherRows { table: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NeighborMean { x: Var, lists: Arc<Vec<Vec<usize>>> },
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Log { .. } => "log",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::NeighborMean { .. } => "neighbor_mean",
            Op::Pick { .. } => "pick",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape optionally borrows a [`ParamStore`]; parameters enter the tape as
/// leaves through [`Tape::param`], at most once each.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    param_leaves: Vec<(ParamId, Var)>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// The leaf for a parameter of the borrowed store.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Config("tape has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::OutOfRange {
                what: "parameter store",
                index: id.0,
                size: store.len(),
            });
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars[id.0] = Some(v);
        self.param_leaves.push((id, v));
        Ok(v)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::Log { x, .. }
            | Op::MaxPoolRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::NeighborMean { x, .. }
            | Op::Pick { x, .. }
            | Op::Sum(x) => self.requires_grad(*x),
            Op::GatherRows { table, .. } => self.requires_grad(*table),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.requires_grad(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::Rank(format!(
                "{op} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    fn zip_same(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, ta.shape(), tb.shape());
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds vector `bias[n]` to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_bias")?;
        let tb = self.value(bias);
        if tb.rank() != 1 || tb.len() != n {
            return shape_err("add_bias", self.shape(a), tb.shape());
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise softmax with max subtraction. A vector is a single row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() || t.cols() == 0 {
            return Err(Error::Empty { op: "softmax" });
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `ln(max(x, floor))`; entries below the floor get zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push(out, Op::Log { x: a, floor })
    }

    /// Column-wise max over the rows of `h[L×d]`, giving a `[d]` vector.
    pub fn max_pool_rows(&mut self, h: Var) -> Result<Var> {
        let t = self.value(h);
        if t.rank() != 2 {
            return Err(Error::Rank(format!(
                "max_pool_rows expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let (l, d) = (t.shape()[0], t.shape()[1]);
        if l == 0 {
            return Err(Error::Empty {
                op: "max_pool_rows",
            });
        }
        let mut argmax = vec![0usize; d];
        let mut out = t.row(0).to_vec();
        for r in 1..l {
            for (c, &v) in t.row(r).iter().enumerate() {
                // strict comparison keeps the first maximal row on ties
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.push(Tensor::vector(out), Op::MaxPoolRows { x: h, argmax })
    }

    /// Rows `idx` of `table[V×e]`, stacked into `[idx.len()×e]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, e) = self.matrix_dims(table, "gather_rows")?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            if i >= v {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), e, out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Rows `start..end` of a matrix (or of a vector viewed as one row).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > rows {
            return Err(Error::OutOfRange {
                what: "rows",
                index: end,
                size: rows,
            });
        }
        let out = Tensor::matrix(
            end - start,
            cols,
            t.data()[start * cols..end * cols].to_vec(),
        )?;
        self.push(out, Op::SliceRows { x, start })
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > cols {
            return Err(Error::OutOfRange {
                what: "columns",
                index: end,
                size: cols,
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let shape = if t.rank() <= 1 {
            vec![w]
        } else {
            vec![rows, w]
        };
        self.push(Tensor::new(shape, out)?, Op::SliceCols { x, start })
    }

    /// Stacks vectors and matrices vertically. Vectors count as one row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return shape_err("concat_rows", self.shape(*first), t.shape());
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return shape_err("concat_cols", self.shape(*first), t.shape());
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Row `i` of the output is the mean of rows `lists[i]` of `x`, or zero
    /// when `lists[i]` is empty.
    pub fn neighbor_mean(&mut self, x: Var, lists: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "neighbor_mean")?;
        if lists.len() != n {
            return shape_err("neighbor_mean", self.shape(x), &[lists.len()]);
        }
        let t = self.value(x);
        let mut out = vec![0.0; n * d];
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let w = 1.0 / list.len() as f64;
            let row = &mut out[i * d..(i + 1) * d];
            for &j in list {
                if j >= n {
                    return Err(Error::OutOfRange {
                        what: "graph nodes",
                        index: j,
                        size: n,
                    });
                }
                for (o, &v) in row.iter_mut().zip(t.row(j)) {
                    *o += w * v;
                }
            }
        }
        self.push(Tensor::matrix(n, d, out)?, Op::NeighborMean { x, lists })
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "pick")?;
        if idx.len() != n {
            return shape_err("pick", self.shape(x), &[idx.len()]);
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(n);
        for (i, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(Error::OutOfRange {
                    what: "classes",
                    index: k,
                    size: c,
                });
            }
            out.push(t.at(i, k));
        }
        self.push(
            Tensor::vector(out),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Runs the chain rule from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.rank() != 0 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.0].requires_grad || matches!(nodes[loss.0].op, Op::Leaf) {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.param_leaves,
        })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |v: &Var| &nodes[v.0].value;
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if rg(a) {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g.data(), tb.data(), &mut ga, m, n, k);
                accumulate(nodes, grads, *a, Tensor::matrix(m, k, ga)?)?;
            }
            if rg(b) {
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(ta.data(), g.data(), &mut gb, m, k, n);
                accumulate(nodes, grads, *b, Tensor::matrix(k, n, gb)?)?;
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            accumulate(nodes, grads, *b, g.map(|v| -v))?;
        }
        Op::AddBias(a, b) => {
            accumulate(nodes, grads, *a, g.clone())?;
            if rg(b) {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::vector(gb))?;
            }
        }
        Op::Mul(a, b) => {
            if rg(a) {
                let ga = zip(g, val(b), |x, y| x * y)?;
                accumulate(nodes, grads, *a, ga)?;
            }
            if rg(b) {
                let gb = zip(g, val(a), |x, y| x * y)?;
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|v| v * c))?,
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, zip(g, y, |gv, s| gv * s * (1.0 - s))?)?,
        Op::Tanh(a) => accumulate(nodes, grads, *a, zip(g, y, |gv, t| gv * (1.0 - t * t))?)?,
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            zip(g, y, |gv, r| if r > 0.0 { gv } else { 0.0 })?,
        )?,
        Op::SoftmaxRows(a) => {
            let c = y.cols();
            let mut gx = vec![0.0; y.len()];
            for ((gxr, yr), gr) in gx
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, &p), &q) in gxr.iter_mut().zip(yr).zip(gr) {
                    *o = p * (q - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(y.shape().to_vec(), gx)?)?;
        }
        Op::Log { x, floor } => {
            let gx = zip(g, val(x), |gv, xv| if xv >= *floor { gv / xv } else { 0.0 })?;
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::MaxPoolRows { x, argmax } => {
            let tx = val(x);
            let d = tx.cols();
            let mut gx = Tensor::zeros(tx.shape());
            for (c, &r) in argmax.iter().enumerate() {
                gx.data_mut()[r * d + c] += g.data()[c];
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::GatherRows { table, idx } => {
            let tt = val(table);
            let e = tt.cols();
            let mut gt = Tensor::zeros(tt.shape());
            for (r, &i) in idx.iter().enumerate() {
                let dst = &mut gt.data_mut()[i * e..(i + 1) * e];
                for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *table, gt)?;
        }
        Op::SliceRows { x, start } => {
            let tx = val(x);
            let c = tx.cols();
            let mut gx = Tensor::zeros(tx.shape());
            gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::SliceCols { x, start } => {
            let tx = val(x);
            let (rows, c, w) = (tx.rows(), tx.cols(), g.cols());
            let mut gx = Tensor::zeros(tx.shape());
            for r in 0..rows {
                gx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let tp = val(p);
                let len = tp.len();
                if rg(p) {
                    let gp =
                        Tensor::new(tp.shape().to_vec(), g.data()[offset..offset + len].to_vec())?;
                    accumulate(nodes, grads, *p, gp)?;
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let mut col = 0;
            for p in parts {
                let tp = val(p);
                let w = tp.cols();
                if rg(p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.row(r)[col..col + w]);
                    }
                    accumulate(nodes, grads, *p, Tensor::new(tp.shape().to_vec(), gp)?)?;
                }
                col += w;
            }
        }
        Op::NeighborMean { x, lists } => {
            let tx = val(x);
            let d = tx.cols();
            let mut gx = Tensor::zeros(tx.shape());
            for (i, list) in lists.iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let w = 1.0 / list.len() as f64;
                for &j in list {
                    let dst = &mut gx.data_mut()[j * d..(j + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o += w * v;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::Pick { x, idx } => {
            let tx = val(x);
            let c = tx.cols();
            let mut gx = Tensor::zeros(tx.shape());
            for (i, &k) in idx.iter().enumerate() {
                gx.data_mut()[i * c + k] += g.data()[i];
            }
            accumulate(nodes, grads, *x, gx)?;
        }
        Op::Sum(x) => {
            let tx = val(x);
            accumulate(nodes, grads, *x, Tensor::filled(tx.shape(), g.item()))?;
        }
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax of a vector.
pub fn softmax_row(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Empty { op: "softmax" });
    }
    let mut out = x.data().to_vec();
    softmax_in_place(&mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient for a parameter, or `None` if it never entered the tape.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, v)| self.wrt(*v))
    }

    /// Adds `scale × grad` into per-parameter buffers indexed by [`ParamId`].
    pub fn accumulate_into(&self, buffers: &mut [Tensor], scale: f64) -> Result<()> {
        for (id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                buffers[id.index()].add_scaled(g, scale)?;
            }
        }
        Ok(())
    }
}
