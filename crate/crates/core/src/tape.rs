//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]. Nodes are only ever
//! appended, so the node index order is a topological order and
//! [`Tape::backward`] walks it in exact reverse. Gradients from fan-out are
//! summed.
//!
//! Broadcasting is limited to scalar-with-tensor in [`Tape::add`],
//! [`Tape::sub`] and [`Tape::mul`]. Row-wise operations that a transformer
//! needs (bias add, AdaLN modulation, gated residuals, per-row scaling) are
//! dedicated fused ops with their own gradient rules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Option<Var> },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Mse(Var, Var),
    L2Norm(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Modulate { x: Var, shift: Var, scale: Var },
    GatedResidual { x: Var, gate: Var, delta: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { src: Var, idx: Vec<usize> },
    ScaleRows { x: Var, w: Var },
    Take { x: Var, idx: Vec<usize> },
    TopkRenorm { alpha: Var, selected: Vec<bool> },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = libm::tanh(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
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

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: kind,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)
        } else if tb.is_scalar() {
            let s = tb.item();
            Ok(ta.map(|x| f(x, s)))
        } else if ta.is_scalar() {
            let s = ta.item();
            Ok(tb.map(|x| f(s, x)))
        } else {
            Err(shape_err(name, ta, tb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `x[T×in] · w[in×out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(shape_err("linear", tx, tw));
        }
        let mut out = tx.matmul(tw)?;
        if let Some(b) = b {
            let tb = self.value(b);
            let cols = out.shape()[1];
            if tb.numel() != cols {
                return Err(shape_err("linear", &out, tb));
            }
            let bias = tb.data().to_vec();
            for row in out.data_mut().chunks_mut(cols) {
                for (o, bv) in row.iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", out, Op::Linear { x, w, b }, &inputs)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, cols) = ta.dims2();
        let mut out = ta.clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = libm::exp(*v - max);
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        self.push("softmax_lastdim", out, Op::Softmax(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            for v in row.iter_mut() {
                *v -= mean;
            }
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for v in row.iter_mut() {
                *v *= inv;
            }
            // Re-center: removes the rounding residue of the first pass.
            let resid = row.iter().sum::<f64>() / n;
            for v in row.iter_mut() {
                *v -= resid;
            }
            inv_std.push(inv);
        }
        self.push("layer_norm", out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).l2_norm());
        self.push("l2_norm", out, Op::L2Norm(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::scalar(ta.sum() / ta.numel().max(1) as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let cols = first.dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        if start + len > rows {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = Tensor::matrix(len, cols, ta.data()[start * cols..(start + len) * cols].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { x: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.dims2().0;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims2().0 != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            total += t.dims2().1;
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.dims2().1;
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let out = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        self.push("slice_cols", out, Op::SliceCols { x: a, start }, &[a])
    }

    /// Column means, `[R×C] -> [1×C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = ta.dims2();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(ta.row(r)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= rows.max(1) as f64;
        }
        let out = Tensor::matrix(1, cols, data)?;
        self.push("mean_rows", out, Op::MeanRows(a), &[a])
    }

    /// AdaLN modulation `x ⊙ (1 + scale) + shift`, shift/scale broadcast over rows.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.dims2();
        let (tsh, tsc) = (self.value(shift), self.value(scale));
        if tsh.numel() != cols || tsc.numel() != cols {
            return Err(shape_err("modulate", tx, tsc));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for ((o, s), b) in row.iter_mut().zip(tsc.data()).zip(tsh.data()) {
                *o = *o * (1.0 + s) + b;
            }
        }
        self.push("modulate", out, Op::Modulate { x, shift, scale }, &[x, shift, scale])
    }

    /// `x + gate ⊙ delta`, gate broadcast over rows.
    pub fn gated_residual(&mut self, x: Var, gate: Var, delta: Var) -> Result<Var> {
        let (tx, td, tg) = (self.value(x), self.value(delta), self.value(gate));
        if tx.shape() != td.shape() {
            return Err(shape_err("gated_residual", tx, td));
        }
        let (_, cols) = tx.dims2();
        if tg.numel() != cols {
            return Err(shape_err("gated_residual", tx, tg));
        }
        let mut out = tx.clone();
        for (orow, drow) in out.data_mut().chunks_mut(cols).zip(td.data().chunks(cols)) {
            for ((o, d), g) in orow.iter_mut().zip(drow).zip(tg.data()) {
                *o += g * d;
            }
        }
        self.push(
            "gated_residual",
            out,
            Op::GatedResidual { x, gate, delta },
            &[x, gate, delta],
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(contract(format!("gather_rows: row {i} out of {rows}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::matrix(idx.len(), cols, data)?;
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Zero `[n_rows×C]` tensor with `src[r]` added into row `idx[r]`.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let ts = self.value(src);
        let (rows, cols) = ts.dims2();
        if rows != idx.len() {
            return Err(contract("scatter_add_rows: index count differs from row count"));
        }
        let mut data = vec![0.0; n_rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(contract(format!("scatter_add_rows: row {i} out of {n_rows}")));
            }
            for (d, v) in data[i * cols..(i + 1) * cols].iter_mut().zip(ts.row(r)) {
                *d += v;
            }
        }
        let out = Tensor::matrix(n_rows, cols, data)?;
        self.push(
            "scatter_add_rows",
            out,
            Op::ScatterAddRows { src, idx: idx.to_vec() },
            &[src],
        )
    }

    /// `x[r,:] * w[r]`
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, cols) = tx.dims2();
        if tw.numel() != rows {
            return Err(shape_err("scale_rows", tx, tw));
        }
        let mut out = tx.clone();
        for (row, s) in out.data_mut().chunks_mut(cols.max(1)).zip(tw.data()) {
            for v in row {
                *v *= s;
            }
        }
        self.push("scale_rows", out, Op::ScaleRows { x, w }, &[x, w])
    }

    /// Flat gather: `out[i] = x.data[idx[i]]`, returned with `shape`.
    pub fn take(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= tx.numel() {
                return Err(contract(format!("take: index {i} out of {}", tx.numel())));
            }
            data.push(tx.data()[i]);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push("take", out, Op::Take { x, idx: idx.to_vec() }, &[x])
    }

    /// Renormalize each row of `alpha` over its `selected` entries; every
    /// other entry becomes 0. Rows with nothing selected are all-zero.
    pub fn topk_renorm(&mut self, alpha: Var, selected: &[bool]) -> Result<Var> {
        let ta = self.value(alpha);
        if selected.len() != ta.numel() {
            return Err(contract("topk_renorm: mask size differs from input"));
        }
        let (_, cols) = ta.dims2();
        let mut out = Tensor::zeros(ta.shape());
        for ((orow, arow), mrow) in out
            .data_mut()
            .chunks_mut(cols)
            .zip(ta.data().chunks(cols))
            .zip(selected.chunks(cols))
        {
            let s: f64 = arow.iter().zip(mrow).filter(|(_, &m)| m).map(|(a, _)| a).sum();
            if s > 0.0 {
                for ((o, a), &m) in orow.iter_mut().zip(arow).zip(mrow) {
                    if m {
                        *o = a / s;
                    }
                }
            }
        }
        self.push(
            "topk_renorm",
            out,
            Op::TopkRenorm {
                alpha,
                selected: selected.to_vec(),
            },
            &[alpha],
        )
    }

    /// Reverse pass from a scalar loss. Populates the gradient of every node
    /// that requires one and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(contract("backward called twice on the same tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut buf = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut buf, &self.nodes[v.0].value);
        self.grads[v.0] = Some(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        let out_dims = self.nodes[i].value.dims2();
        let needs_value = matches!(
            op,
            Op::Softmax(_) | Op::LayerNorm { .. } | Op::L2Norm(_) | Op::TopkRenorm { .. }
        );
        let out = if needs_value {
            self.nodes[i].value.clone()
        } else {
            Tensor::scalar(0.0)
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = out_dims.1;
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |buf, _| matmul_nt_into(g, &bv, buf, m, n, k));
                self.accumulate(b, |buf, _| matmul_tn_into(&av, g, buf, m, k, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.reduce_into(a, g, 1.0);
                self.reduce_into(b, g, sign);
            }
            Op::Mul(a, b) => {
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                self.mul_grad(a, g, &bv);
                self.mul_grad(b, g, &av);
            }
            Op::Scale(a, c) => self.accumulate(a, |buf, _| {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }),
            Op::Linear { x, w, b } => {
                let (t, fan_in) = self.value(x).dims2();
                let fan_out = out_dims.1;
                let wv = self.value(w).data().to_vec();
                let xv = self.value(x).data().to_vec();
                self.accumulate(x, |buf, _| matmul_nt_into(g, &wv, buf, t, fan_out, fan_in));
                self.accumulate(w, |buf, _| matmul_tn_into(&xv, g, buf, t, fan_in, fan_out));
                if let Some(b) = b {
                    self.accumulate(b, |buf, _| {
                        for row in g.chunks(fan_out) {
                            for (d, gv) in buf.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => self.accumulate(a, |buf, x| {
                for ((d, gv), xv) in buf.iter_mut().zip(g).zip(x.data()) {
                    *d += gv * gelu_grad(*xv);
                }
            }),
            Op::Silu(a) => self.accumulate(a, |buf, x| {
                for ((d, gv), &xv) in buf.iter_mut().zip(g).zip(x.data()) {
                    let s = sigmoid(xv);
                    *d += gv * s * (1.0 + xv * (1.0 - s));
                }
            }),
            Op::Softmax(a) => {
                let cols = out_dims.1.max(1);
                self.accumulate(a, |buf, _| {
                    for ((brow, grow), yrow) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in brow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out_dims.1.max(1);
                self.accumulate(x, |buf, _| {
                    for (((brow, grow), yrow), inv) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                        .zip(&inv_std)
                    {
                        let n = cols as f64;
                        let mean_g = grow.iter().sum::<f64>() / n;
                        let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, gv), y) in brow.iter_mut().zip(grow).zip(yrow) {
                            *d += inv * (gv - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                let n = av.numel().max(1) as f64;
                let scale = 2.0 * g[0] / n;
                self.accumulate(a, |buf, _| {
                    for ((d, x), y) in buf.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d += scale * (x - y);
                    }
                });
                self.accumulate(b, |buf, _| {
                    for ((d, x), y) in buf.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d -= scale * (x - y);
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = out.item();
                if norm > 0.0 {
                    self.accumulate(a, |buf, x| {
                        for (d, xv) in buf.iter_mut().zip(x.data()) {
                            *d += g[0] * xv / norm;
                        }
                    });
                }
            }
            Op::Sum(a) => self.accumulate(a, |buf, _| {
                for d in buf.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => self.accumulate(a, |buf, _| {
                let n = buf.len().max(1) as f64;
                for d in buf.iter_mut() {
                    *d += g[0] / n;
                }
            }),
            Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2();
                self.accumulate(a, |buf, _| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(a, |buf, _| {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    let slice = &g[off..off + n];
                    self.accumulate(p, |buf, _| {
                        for (d, gv) in buf.iter_mut().zip(slice) {
                            *d += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out_dims.1;
                self.accumulate(x, |buf, _| {
                    for (d, gv) in buf[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out_dims;
                let mut off = 0;
                for p in parts {
                    let c = self.value(p).dims2().1;
                    self.accumulate(p, |buf, _| {
                        for r in 0..rows {
                            for j in 0..c {
                                buf[r * c + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = out_dims;
                let cols = self.value(x).dims2().1;
                self.accumulate(x, |buf, _| {
                    for r in 0..rows {
                        for j in 0..len {
                            buf[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(a).dims2();
                let inv = 1.0 / rows.max(1) as f64;
                self.accumulate(a, |buf, _| {
                    for row in buf.chunks_mut(cols) {
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::Modulate { x, shift, scale } => {
                let cols = out_dims.1;
                let sc = self.value(scale).data().to_vec();
                let xv = self.value(x).data().to_vec();
                self.accumulate(x, |buf, _| {
                    for (brow, grow) in buf.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, gv), s) in brow.iter_mut().zip(grow).zip(&sc) {
                            *d += gv * (1.0 + s);
                        }
                    }
                });
                self.accumulate(scale, |buf, _| {
                    for (grow, xrow) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for ((d, gv), xval) in buf.iter_mut().zip(grow).zip(xrow) {
                            *d += gv * xval;
                        }
                    }
                });
                self.accumulate(shift, |buf, _| {
                    for grow in g.chunks(cols) {
                        for (d, gv) in buf.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::GatedResidual { x, gate, delta } => {
                let cols = out_dims.1;
                let gt = self.value(gate).data().to_vec();
                let dv = self.value(delta).data().to_vec();
                self.accumulate(x, |buf, _| {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(gate, |buf, _| {
                    for (grow, drow) in g.chunks(cols).zip(dv.chunks(cols)) {
                        for ((d, gv), dl) in buf.iter_mut().zip(grow).zip(drow) {
                            *d += gv * dl;
                        }
                    }
                });
                self.accumulate(delta, |buf, _| {
                    for (brow, grow) in buf.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, gv), gate_v) in brow.iter_mut().zip(grow).zip(&gt) {
                            *d += gv * gate_v;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let cols = out_dims.1;
                self.accumulate(x, |buf, _| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[i * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, idx } => {
                let cols = out_dims.1;
                self.accumulate(src, |buf, _| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[r * cols + j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::ScaleRows { x, w } => {
                let cols = out_dims.1.max(1);
                let wv = self.value(w).data().to_vec();
                let xv = self.value(x).data().to_vec();
                self.accumulate(x, |buf, _| {
                    for ((brow, grow), s) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(&wv) {
                        for (d, gv) in brow.iter_mut().zip(grow) {
                            *d += gv * s;
                        }
                    }
                });
                self.accumulate(w, |buf, _| {
                    for ((d, grow), xrow) in buf.iter_mut().zip(g.chunks(cols)).zip(xv.chunks(cols)) {
                        *d += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Take { x, idx } => self.accumulate(x, |buf, _| {
                for (&i, gv) in idx.iter().zip(g) {
                    buf[i] += gv;
                }
            }),
            Op::TopkRenorm { alpha, selected } => {
                let cols = out_dims.1.max(1);
                let av = self.value(alpha).data().to_vec();
                self.accumulate(alpha, |buf, _| {
                    for (((brow, grow), yrow), (mrow, arow)) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                        .zip(selected.chunks(cols).zip(av.chunks(cols)))
                    {
                        let s: f64 = arow.iter().zip(mrow).filter(|(_, &m)| m).map(|(a, _)| a).sum();
                        if s <= 0.0 {
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), &m) in brow.iter_mut().zip(grow).zip(mrow) {
                            if m {
                                *d += (gv - dot) / s;
                            }
                        }
                    }
                });
            }
        }
    }

    /// Gradient for one side of a scalar-broadcasting binary op.
    fn reduce_into(&mut self, v: Var, g: &[f64], sign: f64) {
        self.accumulate(v, |buf, _| {
            if buf.len() == g.len() {
                for (d, gv) in buf.iter_mut().zip(g) {
                    *d += sign * gv;
                }
            } else {
                buf[0] += sign * g.iter().sum::<f64>();
            }
        });
    }

    fn mul_grad(&mut self, v: Var, g: &[f64], other: &Tensor) {
        self.accumulate(v, |buf, _| {
            let o = other.data();
            if buf.len() == g.len() {
                if o.len() == g.len() {
                    for ((d, gv), ov) in buf.iter_mut().zip(g).zip(o) {
                        *d += gv * ov;
                    }
                } else {
                    for (d, gv) in buf.iter_mut().zip(g) {
                        *d += gv * o[0];
                    }
                }
            } else {
                buf[0] += g.iter().zip(o).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_rows_centered() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1e3, 2e3 + 0.1, -7.0, 4.5], &[1.0, 1.0, 1.0, 2.0]]).unwrap());
        let y = tape.layer_norm(x).unwrap();
        for r in 0..2 {
            let mean: f64 = tape.value(y).row(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_w() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -1.5, 3.0]));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -1.5, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, -3.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let a = tape.scale(w, 3.0).unwrap();
        let b = tape.add(a, w).unwrap();
        tape.backward(b).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 4.0);
    }

    #[test]
    fn nan_output_is_a_numeric_fault() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::MAX, 1.0]));
        let err = tape.scale(x, 10.0).unwrap_err();
        assert_eq!(err, Error::NumericFault { op: "scale" });
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn broadcast_other_than_scalar_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn topk_renorm_values() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(1, 3, vec![0.5, 0.3, 0.2]).unwrap());
        let g = tape.topk_renorm(a, &[true, true, false]).unwrap();
        let v = tape.value(g).data();
        assert!((v[0] - 0.625).abs() < 1e-15 && (v[1] - 0.375).abs() < 1e-15 && v[2] == 0.0);
    }
}
