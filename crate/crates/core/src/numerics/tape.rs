//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes only ever reference earlier nodes, so the insertion order
//! is a topological order and [`Tape::backward`] simply walks the nodes in
//! reverse.
//!
//! Binary elementwise ops accept two operands of identical shape or one
//! single-element operand. Anything else needs a dedicated op
//! ([`Tape::add_row`], [`Tape::layer_norm`], ...).

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rules that can be deliberately broken to exercise the gradient
/// checker. Corrupted rules scale their input gradients by 1.25.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    Matmul,
    Softmax,
    LayerNorm,
}

const FAULT_SCALE: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log { floor: f64 },
    Sigmoid,
    Relu,
    Abs,
    Scale(f64),
    AddScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        bc: Broadcast,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    SumAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Index {
        x: Var,
        index: usize,
    },
    Stack(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
    backpropagated: bool,
    fault: Option<GradFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backpropagated: false,
            fault: None,
        }
    }

    /// A tape that evaluates values but records no gradient information.
    /// Every node it produces is a constant.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.recording;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present after [`Tape::backward`] for every
    /// node that requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&self, op: Op) -> Op {
        if self.recording {
            op
        } else {
            Op::Leaf
        }
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Broadcast::Same
        } else if tb.numel() == 1 {
            Broadcast::RhsScalar
        } else if ta.numel() == 1 {
            Broadcast::LhsScalar
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
                BinaryKind::Min => "minimum",
                BinaryKind::Max => "maximum",
            };
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Min => x.min(y),
            BinaryKind::Max => x.max(y),
        };
        let value = match bc {
            Broadcast::Same => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Broadcast::RhsScalar => {
                let y = tb.item();
                ta.map(|x| f(x, y))
            }
            Broadcast::LhsScalar => {
                let x = ta.item();
                tb.map(|y| f(x, y))
            }
        };
        let rg = self.rg(&[a, b]);
        let op = self.record(Op::Binary { kind, bc, a, b });
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var, c: f64) -> Var {
        let value = {
            let t = self.value(x);
            match kind {
                UnaryKind::Neg => t.map(|v| -v),
                UnaryKind::Exp => t.map(f64::exp),
                UnaryKind::Log { floor } => t.map(|v| v.max(floor).ln()),
                UnaryKind::Sigmoid => t.map(sigmoid),
                UnaryKind::Relu => t.map(|v| v.max(0.0)),
                UnaryKind::Abs => t.map(f64::abs),
                UnaryKind::Scale(s) => t.map(|v| v * s),
                UnaryKind::AddScalar => t.map(|v| v + c),
            }
        };
        let rg = self.rg(&[x]);
        let op = self.record(Op::Unary { kind, x });
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x, 0.0)
    }

    /// Natural log of `max(x, floor)`. The gradient is zero where the floor
    /// is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        self.unary(UnaryKind::Log { floor }, x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x, 0.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar, x, c)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        let op = self.record(Op::SumAll(x));
        self.push(value, op, rg)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Axis {
                op: "mean_over_axis",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        let op = self.record(Op::MeanAxis { x, axis });
        Ok(self.push(value, op, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        let op = self.record(Op::Softmax { x, axis });
        Ok(self.push(value, op, rg))
    }

    // ---- matrix ops --------------------------------------------------

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.matrix_dims().ok_or_else(|| Error::dim(op, t.shape(), &[]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        let op = self.record(Op::Matmul { a, b, m, k, n });
        Ok(self.push(value, op, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims("transpose", x)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        let rg = self.rg(&[x]);
        let op = self.record(Op::Transpose { x, rows, cols });
        Ok(self.push(value, op, rg))
    }

    /// Adds a row vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.dims("add_row", x)?;
        let r = self.value(row);
        if r.numel() != cols {
            return Err(Error::dim("add_row", self.value(x).shape(), r.shape()));
        }
        let rd = r.data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..rows {
            for (o, b) in out[i * cols..(i + 1) * cols].iter_mut().zip(rd) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[x, row]);
        let op = self.record(Op::AddRow { x, row });
        Ok(self.push(value, op, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        let op = self.record(Op::ConcatRows(parts.to_vec()));
        Ok(self.push(value, op, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims("slice_rows", x)?;
        if start + len > rows {
            return Err(Error::dim("slice_rows", self.value(x).shape(), &[start, len]));
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], out)?;
        let rg = self.rg(&[x]);
        let op = self.record(Op::SliceRows { x, start });
        Ok(self.push(value, op, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        let op = self.record(Op::ConcatCols(parts.to_vec()));
        Ok(self.push(value, op, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims("slice_cols", x)?;
        if start + len > cols {
            return Err(Error::dim("slice_cols", self.value(x).shape(), &[start, len]));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(&[x]);
        let op = self.record(Op::SliceCols { x, start });
        Ok(self.push(value, op, rg))
    }

    /// Embedding-style lookup: row `indices[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims("gather_rows", table)?;
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], out)?;
        let rg = self.rg(&[table]);
        let op = self.record(Op::GatherRows {
            table,
            indices: indices.to_vec(),
        });
        Ok(self.push(value, op, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(Error::dim("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[r] = rstd;
            for c in 0..cols {
                let xh = (row[c] - mean) * rstd;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = if self.recording {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, op, rg))
    }

    /// Picks one element (flat row-major index) as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::Contract(format!(
                "index {index} out of range for shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::scalar(t.data()[index]);
        let rg = self.rg(&[x]);
        let op = self.record(Op::Index { x, index });
        Ok(self.push(value, op, rg))
    }

    /// Stacks single-element tensors into a rank-1 tensor.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.numel() != 1 {
                return Err(Error::dim("stack", t.shape(), &[1]));
            }
            out.push(t.item());
        }
        let value = Tensor::vector(out);
        let rg = self.rg(parts);
        let op = self.record(Op::Stack(parts.to_vec()));
        Ok(self.push(value, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        let op = self.record(Op::Reshape(x));
        Ok(self.push(value, op, rg))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    ///
    /// A second call without [`Tape::zero_grad`] is rejected rather than
    /// silently doubling gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backpropagated {
            return Err(Error::Contract("backward called twice without zero_grad".into()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn fault_scale(&self, f: GradFault) -> f64 {
        if self.fault == Some(f) {
            FAULT_SCALE
        } else {
            1.0
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, bc, a, b } => {
                let (a, b) = (*a, *b);
                let ad = val(a);
                let bd = val(b);
                let xa = |i: usize| if *bc == Broadcast::LhsScalar { ad[0] } else { ad[i] };
                let xb = |i: usize| if *bc == Broadcast::RhsScalar { bd[0] } else { bd[i] };
                // local partials (d out / d a, d out / d b) at element i
                let partial = |i: usize| -> (f64, f64) {
                    let (x, y) = (xa(i), xb(i));
                    match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (y, x),
                        BinaryKind::Div => (1.0 / y, -x / (y * y)),
                        BinaryKind::Min => {
                            if x <= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        BinaryKind::Max => {
                            if x >= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    }
                };
                let lhs_scalar = *bc == Broadcast::LhsScalar;
                let rhs_scalar = *bc == Broadcast::RhsScalar;
                acc(a, &|s| {
                    for (i, &gi) in gd.iter().enumerate() {
                        let p = partial(i).0 * gi;
                        if lhs_scalar {
                            s[0] += p;
                        } else {
                            s[i] += p;
                        }
                    }
                });
                acc(b, &|s| {
                    for (i, &gi) in gd.iter().enumerate() {
                        let p = partial(i).1 * gi;
                        if rhs_scalar {
                            s[0] += p;
                        } else {
                            s[i] += p;
                        }
                    }
                });
            }
            Op::Unary { kind, x } => {
                let xd = val(*x);
                let yd = node.value.data();
                acc(*x, &|s| {
                    for i in 0..gd.len() {
                        let d = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => yd[i],
                            UnaryKind::Log { floor } => {
                                if xd[i] >= *floor {
                                    1.0 / xd[i]
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                            UnaryKind::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Abs => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else if xd[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Scale(c) => *c,
                            UnaryKind::AddScalar => 1.0,
                        };
                        s[i] += d * gd[i];
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = gd[0];
                acc(*x, &|s| s.iter_mut().for_each(|v| *v += g0));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let inv = 1.0 / n as f64;
                acc(*x, &|s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                s[(o * n + j) * inner + i] += gd[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let y = node.value.data();
                let scale = self.fault_scale(GradFault::Softmax);
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                s[at(j)] += scale * y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = val(*a);
                let bd = val(*b);
                let scale = self.fault_scale(GradFault::Matmul);
                // dA = dC · Bᵀ
                acc(*a, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += gd[i * n + j] * bd[p * n + j];
                            }
                            s[i * k + p] += scale * t;
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = scale * ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &gd[i * n..(i + 1) * n];
                            for (sv, gv) in s[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *sv += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*x, &|s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += gd[c * rows + r];
                        }
                    }
                });
            }
            Op::AddRow { x, row } => {
                let cols = self.nodes[row.0].value.numel();
                acc(*x, &|s| s.iter_mut().zip(gd).for_each(|(sv, gv)| *sv += gv));
                acc(*row, &|s| {
                    for chunk in gd.chunks(cols) {
                        s.iter_mut().zip(chunk).for_each(|(sv, gv)| *sv += gv);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let piece = &gd[offset..offset + len];
                    acc(p, &|s| s.iter_mut().zip(piece).for_each(|(sv, gv)| *sv += gv));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.shape()[1];
                let off = start * cols;
                acc(*x, &|s| {
                    s[off..off + gd.len()].iter_mut().zip(gd).for_each(|(sv, gv)| *sv += gv)
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(p, &|s| {
                        for r in 0..rows {
                            for c in 0..w {
                                s[r * w + c] += gd[r * cols + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let rows = node.value.shape()[0];
                let len = node.value.shape()[1];
                let cols = self.nodes[x.0].value.shape()[1];
                acc(*x, &|s| {
                    for r in 0..rows {
                        for c in 0..len {
                            s[r * cols + start + c] += gd[r * len + c];
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let cols = node.value.shape()[1];
                acc(*table, &|s| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            s[i * cols + c] += gd[r * cols + c];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let cols = node.value.shape()[1];
                let rows = inv_std.len();
                let gam = val(*gamma);
                let scale = self.fault_scale(GradFault::LayerNorm);
                acc(*x, &|s| {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                        }
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            s[r * cols + c] += scale * inv_std[r] / nf * (nf * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                });
                acc(*gamma, &|s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += gd[r * cols + c] * normalized[r * cols + c];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += gd[r * cols + c];
                        }
                    }
                });
            }
            Op::Index { x, index } => {
                let g0 = gd[0];
                acc(*x, &|s| s[*index] += g0);
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let gi = gd[i];
                    acc(p, &|s| s[0] += gi);
                }
            }
            Op::Reshape(x) => {
                acc(*x, &|s| s.iter_mut().zip(gd).for_each(|(sv, gv)| *sv += gv));
            }
        }
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

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
