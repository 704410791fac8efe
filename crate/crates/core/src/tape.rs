//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Tape`] holding its value and, when
//! any input is tracked, the rule needed to push gradients back to its
//! inputs. Nodes are appended in evaluation order, so the node sequence is
//! already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep.
//!
//! ```
//! use tbvlm_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::{
    axis_split, gelu, gelu_grad, gemm, layer_norm_kernel, log_sigmoid, matmul_kernel, sigmoid,
    softmax_kernel, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Raw box parameters beyond this magnitude are clamped before the sigmoid
/// so both the position and the size stay strictly inside (0, 1).
const BOX_RAW_LIMIT: f64 = 30.0;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    L2NormRows { x: Var, norms: Vec<f64> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    BoxTransform(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::AddScalar(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::BoxTransform(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::L2NormRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    tracked: bool,
    op: Op,
}

/// Gradients produced by a backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of a computation; one tape per logical thread of work.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&mut self, value: Arc<Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            tracked,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64, TensorError> {
        self.value(s).item().map_err(|_| TensorError::Shape {
            op,
            left: self.value(s).shape().to_vec(),
            right: Vec::new(),
        })
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, false, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, false, b, true)
    }

    fn matmul_impl(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var, TensorError> {
        let out = matmul_kernel(self.value(a), a_t, self.value(b), b_t)?;
        Ok(self.push(out, Op::MatMul { a, b, a_t, b_t }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[c]` bias to every row of `x`; the only broadcast supported.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.shape() != [c] || tx.rank() == 0 {
            return Err(TensorError::Shape {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let k = self.scalar_of("mul_scalar", s)?;
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::MulScalar(x, s)))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let k = self.scalar_of("add_scalar", s)?;
        let out = self.value(x).map(|v| v + k);
        Ok(self.push(out, Op::AddScalar(x, s)))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = softmax_kernel(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (out, xhat, rstd) =
            layer_norm_kernel(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], data);
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid("concat_cols of nothing".into()))?;
        let r = self.value(*first).dims2()?.0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let out = Tensor::from_parts(vec![len, c], t.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid("concat_rows of nothing".into()))?;
        let c = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.value(*first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (r, c) = t.dims2()?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    bound: r,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), c], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Scales every row to unit L2 norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let mut norms = Vec::with_capacity(r);
        let mut data = t.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(TensorError::ZeroNorm(i));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::from_parts(vec![r, c], data);
        Ok(self.push(out, Op::L2NormRows { x, norms }))
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (r, v) = t.dims2()?;
        if targets.len() != r {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: v,
                });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy with no targets".into()));
        }
        let out = Tensor::scalar(total / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
        ))
    }

    /// Maps raw `[n, 4]` box parameters to valid `(x0, y0, x1, y1)` boxes in
    /// `[0, 1]`. Columns are (position x, position y, size x, size y); with
    /// `u = σ(position)` and `s = σ(size)` the interval is
    /// `[u·(1−s), 1−(1−u)·(1−s)]`, whose length is exactly `s > 0`.
    pub fn box_transform(&mut self, raw: Var) -> Result<Var, TensorError> {
        let t = self.value(raw);
        let (n, c) = t.dims2()?;
        if c != 4 {
            return Err(TensorError::Shape {
                op: "box_transform",
                left: t.shape().to_vec(),
                right: vec![n, 4],
            });
        }
        let mut data = vec![0.0; n * 4];
        for i in 0..n {
            let r = t.row(i);
            for axis in 0..2 {
                let u = sigmoid(r[axis].clamp(-BOX_RAW_LIMIT, BOX_RAW_LIMIT));
                let s = sigmoid(r[axis + 2].clamp(-BOX_RAW_LIMIT, BOX_RAW_LIMIT));
                data[i * 4 + axis] = u * (1.0 - s);
                data[i * 4 + axis + 2] = 1.0 - (1.0 - u) * (1.0 - s);
            }
        }
        let out = Tensor::from_parts(vec![n, 4], data);
        Ok(self.push(out, Op::BoxTransform(raw)))
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of a one-element `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let node = self.nodes.get(loss.0).ok_or(TensorError::UnknownNode(loss.0))?;
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.tracked {
            return Err(TensorError::Invalid(format!("loss node {} is not tracked", loss.0)));
        }
        self.backward_seeded(vec![(loss, Tensor::ones(node.value.shape()))])
    }

    /// Reverse sweep starting from arbitrary upstream gradients, which lets a
    /// batch-level loss computed on another tape flow back into this one.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients, TensorError> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            let node = self.nodes.get(v.0).ok_or(TensorError::UnknownNode(v.0))?;
            if node.value.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "backward seed",
                    left: node.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !node.tracked {
                continue;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc.data_mut(), g.data()),
                slot => *slot = Some(g),
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
                .data_mut(),
        )
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let k = if *a_t { ta.shape()[0] } else { ta.shape()[1] };
                if let Some(da) = self.slot(grads, *a) {
                    if *a_t {
                        gemm(k, n, m, tb.data(), *b_t, gd, true, da, true);
                    } else {
                        gemm(m, n, k, gd, false, tb.data(), !*b_t, da, true);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *b_t {
                        gemm(n, m, k, gd, true, ta.data(), *a_t, db, true);
                    } else {
                        gemm(k, m, n, ta.data(), !*a_t, gd, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, gd);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(gd).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, g), v) in da.iter_mut().zip(gd).zip(tb.data()) {
                        *d += g * v;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, g), v) in db.iter_mut().zip(gd).zip(ta.data()) {
                        *d += g * v;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, gd);
                }
                let c = y.cols();
                if let Some(db) = self.slot(grads, *bias) {
                    for row in gd.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, g)| *d += g * f);
                }
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).data()[0];
                let tx = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, g)| *d += g * k);
                }
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += gd.iter().zip(tx.data()).map(|(g, v)| g * v).sum::<f64>();
                }
            }
            Op::AddScalar(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, gd);
                }
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += gd.iter().sum::<f64>();
                }
            }
            Op::Gelu(x) => self.unary(grads, *x, y, gd, |xv, _| gelu_grad(xv)),
            Op::Sigmoid(x) => self.unary(grads, *x, y, gd, |_, yv| yv * (1.0 - yv)),
            Op::LogSigmoid(x) => self.unary(grads, *x, y, gd, |xv, _| sigmoid(-xv)),
            Op::Exp(x) => self.unary(grads, *x, y, gd, |_, yv| yv),
            Op::Abs(x) => self.unary(grads, *x, y, gd, |xv, _| {
                if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + j;
                            let dot: f64 = (0..n).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                            for k in 0..n {
                                dx[idx(k)] += yd[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let gain_v = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gain_v[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gain_v[j];
                            dx[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for gr in gd.chunks(d) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gd[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, gd);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (y.shape()[0], y.shape()[1]);
                let c = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..r {
                        add_into(&mut dx[i * c + start..i * c + start + len], &gd[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (y.shape()[0], y.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for i in 0..r {
                            add_into(
                                &mut dp[i * pc..(i + 1) * pc],
                                &gd[i * total + offset..i * total + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(&mut dx[start * c..start * c + gd.len()], gd);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(dp) = self.slot(grads, *p) {
                        add_into(dp, &gd[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Gather { table, ids } => {
                let c = y.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * c..(id + 1) * c], &gd[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let c = y.cols();
                let yd = y.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let (yr, gr) = (&yd[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
            } => {
                let t = self.value(*logits);
                let v = t.cols();
                let scale = gd[0] / *count as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, target) in targets.iter().enumerate() {
                        let Some(label) = *target else { continue };
                        let row = t.row(i);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - max).exp() / z;
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[i * v + j] += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::BoxTransform(raw) => {
                let t = self.value(*raw);
                if let Some(dr) = self.slot(grads, *raw) {
                    for i in 0..t.rows() {
                        let r = t.row(i);
                        for axis in 0..2 {
                            let (pa, sa) = (r[axis], r[axis + 2]);
                            let u = sigmoid(pa.clamp(-BOX_RAW_LIMIT, BOX_RAW_LIMIT));
                            let s = sigmoid(sa.clamp(-BOX_RAW_LIMIT, BOX_RAW_LIMIT));
                            let du = if pa.abs() < BOX_RAW_LIMIT { u * (1.0 - u) } else { 0.0 };
                            let ds = if sa.abs() < BOX_RAW_LIMIT { s * (1.0 - s) } else { 0.0 };
                            let g_lo = gd[i * 4 + axis];
                            let g_hi = gd[i * 4 + axis + 2];
                            // lo = u(1−s), hi = 1 − (1−u)(1−s)
                            dr[i * 4 + axis] += du * (g_lo * (1.0 - s) + g_hi * (1.0 - s));
                            dr[i * 4 + axis + 2] += ds * (-g_lo * u + g_hi * (1.0 - u));
                        }
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        y: &Tensor,
        gd: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        let xv = Arc::clone(&self.nodes[x.0].value);
        if let Some(dx) = self.slot(grads, x) {
            for (((d, g), &xi), &yi) in dx.iter_mut().zip(gd).zip(xv.data()).zip(y.data()) {
                *d += g * deriv(xi, yi);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
