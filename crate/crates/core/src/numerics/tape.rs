//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every recording method evaluates its op eagerly, checks the result for
//! NaN/Inf and appends a node. Nodes only reference earlier nodes, so the
//! record is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use std::sync::Arc;

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into};
use super::{sigmoid, softplus, NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    SegmentMean(Var, Arc<[(usize, usize)]>),
    MeanAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SegmentMean(..) => "segment_mean",
            Op::MeanAll(..) => "mean_all",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
///
/// A tape is single-use: after [`Tape::backward`] it rejects new ops until
/// [`Tape::reset`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sealed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if `var` does not
    /// require a gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.sealed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var, NumericsError> {
        let rg = tensor.requires_grad();
        self.push(Op::Leaf, tensor, rg)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Result<Var, NumericsError> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, NumericsError> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var, NumericsError> {
        if self.sealed {
            return Err(NumericsError::TapeSealed);
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `x (r x k) * w (k x m)`. A rank-1 `x` yields a rank-1 result.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k) = xv.matrix_dims();
        if wv.rank() != 2 || wv.shape()[0] != k || xv.rank() > 2 {
            return Err(self.shape_err("matmul", x, w));
        }
        let n = wv.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(xv.data(), wv.data(), &mut out, m, k, n);
        let shape = if xv.rank() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.rg(&[x, w]);
        self.push(Op::MatMul(x, w), Tensor::from_parts(shape, out), rg)
    }

    /// Adds a length-`m` bias to every row of an `r x m` (or length-`m`) input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if bv.rank() != 1 || bv.len() != cols || xv.rank() == 0 {
            return Err(self.shape_err("add_bias", x, b));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, b]);
        self.push(Op::AddBias(x, b), Tensor::from_parts(shape, out), rg)
    }

    /// `y = x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 || xv.cols() != wv.shape()[0] {
            return Err(self.shape_err("linear", x, w));
        }
        if bv.rank() != 1 || bv.len() != wv.shape()[1] {
            return Err(self.shape_err("linear", w, b));
        }
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.shape_err(op.name(), a, b));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(op, Tensor::from_parts(shape, data), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Result<Var, NumericsError> {
        match kind {
            Activation::Sigmoid => self.unary(a, Op::Sigmoid(a), sigmoid),
            Activation::Softplus => self.unary(a, Op::Softplus(a), softplus),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.activate(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.activate(a, Activation::Softplus)
    }

    /// Output row `e` is input row `index[e]`.
    pub fn gather_rows(&mut self, src: Var, index: Arc<[usize]>) -> Result<Var, NumericsError> {
        let sv = self.value(src);
        if sv.rank() != 2 {
            return Err(NumericsError::Shape {
                op: "gather_rows",
                left: sv.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let (rows, cols) = sv.matrix_dims();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index.iter() {
            if r >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    rows,
                });
            }
            out.extend_from_slice(sv.row(r));
        }
        let rg = self.rg(&[src]);
        let shape = vec![index.len(), cols];
        self.push(
            Op::GatherRows(src, index),
            Tensor::from_parts(shape, out),
            rg,
        )
    }

    /// Output row `r` is the sum of input rows `e` with `index[e] == r`.
    /// Rows that receive nothing are zero.
    pub fn scatter_add_rows(
        &mut self,
        src: Var,
        index: Arc<[usize]>,
        out_rows: usize,
    ) -> Result<Var, NumericsError> {
        let sv = self.value(src);
        let (rows, cols) = sv.matrix_dims();
        if sv.rank() != 2 || rows != index.len() {
            return Err(NumericsError::Shape {
                op: "scatter_add_rows",
                left: sv.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let mut out = vec![0.0; out_rows * cols];
        for (e, &r) in index.iter().enumerate() {
            if r >= out_rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: r,
                    rows: out_rows,
                });
            }
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(sv.row(e)) {
                *o += v;
            }
        }
        let rg = self.rg(&[src]);
        self.push(
            Op::ScatterAddRows(src, index),
            Tensor::from_parts(vec![out_rows, cols], out),
            rg,
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Shape {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rank() != 2 || self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![rows, total], out),
            rg,
        )
    }

    /// Mean over each `(start, len)` row segment; one output row per segment.
    pub fn segment_mean(
        &mut self,
        src: Var,
        segments: Arc<[(usize, usize)]>,
    ) -> Result<Var, NumericsError> {
        let sv = self.value(src);
        let (rows, cols) = sv.matrix_dims();
        let mut out = vec![0.0; segments.len() * cols];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 {
                return Err(NumericsError::EmptyGraph { op: "segment_mean" });
            }
            if start + len > rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "segment_mean",
                    index: start + len - 1,
                    rows,
                });
            }
            let acc = &mut out[s * cols..(s + 1) * cols];
            for r in start..start + len {
                for (o, &v) in acc.iter_mut().zip(sv.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / len as f64;
            acc.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[src]);
        self.push(
            Op::SegmentMean(src, segments.clone()),
            Tensor::from_parts(vec![segments.len(), cols], out),
            rg,
        )
    }

    /// Column-wise mean of an `N x d` matrix, as a length-`d` vector.
    pub fn mean_rows(&mut self, src: Var) -> Result<Var, NumericsError> {
        let sv = self.value(src);
        let rows = sv.rows();
        if sv.rank() != 2 {
            return Err(NumericsError::Shape {
                op: "mean_rows",
                left: sv.shape().to_vec(),
                right: vec![],
            });
        }
        if rows == 0 {
            return Err(NumericsError::EmptyGraph { op: "mean_rows" });
        }
        let pooled = self.segment_mean(src, Arc::from(vec![(0, rows)]))?;
        // [1, d] -> [d]; the segment-mean backward only looks at the data
        let value = &mut self.nodes[pooled.0].value;
        let d = value.cols();
        value.reshape_in_place(vec![d]);
        Ok(pooled)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, src: Var) -> Result<Var, NumericsError> {
        let sv = self.value(src);
        if sv.is_empty() {
            return Err(NumericsError::EmptyGraph { op: "mean_all" });
        }
        let m = sv.data().iter().sum::<f64>() / sv.len() as f64;
        let rg = self.rg(&[src]);
        self.push(Op::MeanAll(src), Tensor::scalar(m), rg)
    }

    /// Reverse sweep from a scalar `loss`. Seals the tape.
    ///
    /// Every leaf that requires a gradient gets one, zero-filled when the loss
    /// does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.sealed {
            return Err(NumericsError::TapeSealed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.sealed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::from_parts(node.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        // Accumulates into the gradient buffer of `v`, allocating on first use.
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.matrix_dims();
                let n = bv.shape()[1];
                if wants(*a) {
                    matmul_bt_acc(g, bv.data(), acc(grads, *a, m * k), m, k, n);
                }
                if wants(*b) {
                    matmul_at_acc(av.data(), g, acc(grads, *b, k * n), m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                let cols = val(*b).len();
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, cols);
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if wants(*b) {
                    let gb = acc(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let ga = acc(grads, *a, g.len());
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(other) {
                        *o += gv * y;
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let gb = acc(grads, *b, g.len());
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(other) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v);
            }
            Op::Square(a) => {
                let x = val(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    *o += 2.0 * xv * gv;
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                    *o += gv * sigmoid(xv);
                }
            }
            Op::GatherRows(src, index) => {
                let sv = val(*src);
                let cols = sv.cols();
                let gs = acc(grads, *src, sv.len());
                for (e, &r) in index.iter().enumerate() {
                    let grow = &g[e * cols..(e + 1) * cols];
                    for (o, &v) in gs[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                        *o += v;
                    }
                }
            }
            Op::ScatterAddRows(src, index) => {
                let sv = val(*src);
                let cols = sv.cols();
                let gs = acc(grads, *src, sv.len());
                for (e, &r) in index.iter().enumerate() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for (o, &v) in gs[e * cols..(e + 1) * cols].iter_mut().zip(grow) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (o, &v) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SegmentMean(src, segments) => {
                let sv = val(*src);
                let cols = sv.cols();
                let gs = acc(grads, *src, sv.len());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    let grow = &g[s * cols..(s + 1) * cols];
                    for r in start..start + len {
                        for (o, &v) in gs[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::MeanAll(src) => {
                let n = val(*src).len();
                let share = g[0] / n as f64;
                let gs = acc(grads, *src, n);
                gs.iter_mut().for_each(|o| *o += share);
            }
        }
    }
}
