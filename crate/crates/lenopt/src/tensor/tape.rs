//! Operation tape for reverse-mode differentiation.
//!
//! A `Tape` records every primitive applied during a forward pass; `backward`
//! replays the record in exact reverse order and accumulates gradients into
//! every leaf that was registered with `requires_grad`. One training step
//! owns one tape exclusively; a tape cannot run backward twice.

use super::{matmul_raw, transpose_raw, Tensor, TensorError};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddBias { x: usize, bias: usize },
    Gelu { x: usize },
    SoftmaxRows { x: usize, temperature: f64 },
    LogSoftmaxRows { x: usize, temperature: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    GatherRows { x: usize, indices: Vec<usize> },
    ScatterRows { x: usize, indices: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { x: usize },
}

struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    slots: Vec<Slot>,
}

/// Recorded forward computation, ready for one backward pass.
pub struct Tape {
    inner: RefCell<TapeInner>,
    consumed: Cell<bool>,
    macs: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient map produced by [`Tape::backward`]; holds one tensor per
/// `requires_grad` leaf, shaped identically to the leaf.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Val) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner::default()),
            consumed: Cell::new(false),
            macs: Cell::new(0),
        }
    }

    /// Multiply-accumulate operations recorded by `matmul` calls so far;
    /// the instrumentation behind cost-model verification.
    pub fn matmul_macs(&self) -> u64 {
        self.macs.get()
    }

    /// Registers a tensor as a leaf; its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&self, t: Tensor) -> Val {
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg, rg)
    }

    /// Registers a tensor as a constant: never differentiated.
    pub fn constant(&self, t: &Tensor) -> Val {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, false)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool, needs_grad: bool) -> Val {
        let mut inner = self.inner.borrow_mut();
        inner.slots.push(Slot {
            shape,
            data,
            op,
            requires_grad,
            needs_grad,
        });
        Val(inner.slots.len() - 1)
    }

    fn needs(&self, vals: &[Val]) -> bool {
        let inner = self.inner.borrow();
        vals.iter().any(|v| inner.slots[v.0].needs_grad)
    }

    pub fn shape(&self, v: Val) -> Vec<usize> {
        self.inner.borrow().slots[v.0].shape.clone()
    }

    /// Copies the value out of the tape.
    pub fn value(&self, v: Val) -> Tensor {
        let inner = self.inner.borrow();
        let s = &inner.slots[v.0];
        Tensor::new(s.shape.clone(), s.data.clone()).expect("slot is well formed")
    }

    /// Reads without copying.
    pub fn with_value<R>(&self, v: Val, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let inner = self.inner.borrow();
        let s = &inner.slots[v.0];
        f(&s.shape, &s.data)
    }

    pub fn item(&self, v: Val) -> f64 {
        self.with_value(v, |_, d| d[0])
    }

    fn rows_cols(shape: &[usize]) -> (usize, usize) {
        let cols = *shape.last().expect("non-empty shape");
        let rows: usize = shape.iter().product::<usize>() / cols;
        (rows, cols)
    }

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&self, a: Val, b: Val) -> Result<Val, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.macs.set(self.macs.get() + (m * k * n) as u64);
        let data = {
            let inner = self.inner.borrow();
            matmul_raw(&inner.slots[a.0].data, &inner.slots[b.0].data, m, k, n)
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::MatMul { a: a.0, b: b.0 }, false, ng))
    }

    pub fn transpose(&self, x: Val) -> Result<Val, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::DimMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let data = {
            let inner = self.inner.borrow();
            transpose_raw(&inner.slots[x.0].data, s[0], s[1])
        };
        let ng = self.needs(&[x]);
        Ok(self.push(vec![s[1], s[0]], data, Op::Transpose { x: x.0 }, false, ng))
    }

    fn zip_elementwise(
        &self,
        op_name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Val, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::DimMismatch { op: op_name, lhs: sa, rhs: sb });
        }
        let data = {
            let inner = self.inner.borrow();
            inner.slots[a.0]
                .data
                .iter()
                .zip(&inner.slots[b.0].data)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(sa, data, op, false, ng))
    }

    pub fn add(&self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&self, x: Val, c: f64) -> Val {
        let s = self.shape(x);
        let data = {
            let inner = self.inner.borrow();
            inner.slots[x.0].data.iter().map(|&v| v * c).collect()
        };
        let ng = self.needs(&[x]);
        self.push(s, data, Op::Scale { x: x.0, c }, false, ng)
    }

    /// Adds a length-`n` bias vector to every row of `x[..×n]`.
    pub fn add_bias(&self, x: Val, bias: Val) -> Result<Val, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let (_, cols) = Self::rows_cols(&sx);
        if sb.len() != 1 || sb[0] != cols {
            return Err(TensorError::DimMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let data = {
            let inner = self.inner.borrow();
            let bd = &inner.slots[bias.0].data;
            inner.slots[x.0]
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bd[i % cols])
                .collect()
        };
        let ng = self.needs(&[x, bias]);
        Ok(self.push(sx, data, Op::AddBias { x: x.0, bias: bias.0 }, false, ng))
    }

    pub fn gelu(&self, x: Val) -> Val {
        let s = self.shape(x);
        let data = {
            let inner = self.inner.borrow();
            inner.slots[x.0]
                .data
                .iter()
                .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
                .collect()
        };
        let ng = self.needs(&[x]);
        self.push(s, data, Op::Gelu { x: x.0 }, false, ng)
    }

    /// Row-wise softmax of `x / temperature`, max-subtracted for stability.
    pub fn softmax_rows(&self, x: Val, temperature: f64) -> Result<Val, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::BadParameter { what: "temperature", value: temperature });
        }
        let s = self.shape(x);
        let (rows, cols) = Self::rows_cols(&s);
        let data = {
            let inner = self.inner.borrow();
            softmax_raw(&inner.slots[x.0].data, rows, cols, temperature)
        };
        let ng = self.needs(&[x]);
        Ok(self.push(s, data, Op::SoftmaxRows { x: x.0, temperature }, false, ng))
    }

    /// Row-wise log-softmax of `x / temperature`; safe where softmax underflows.
    pub fn log_softmax_rows(&self, x: Val, temperature: f64) -> Result<Val, TensorError> {
        if !(temperature > 0.0) {
            return Err(TensorError::BadParameter { what: "temperature", value: temperature });
        }
        let s = self.shape(x);
        let (rows, cols) = Self::rows_cols(&s);
        let data = {
            let inner = self.inner.borrow();
            let xd = &inner.slots[x.0].data;
            let mut out = vec![0.0; xd.len()];
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
                let lse = row
                    .iter()
                    .map(|&v| (v / temperature - mx).exp())
                    .sum::<f64>()
                    .ln()
                    + mx;
                for c in 0..cols {
                    out[r * cols + c] = row[c] / temperature - lse;
                }
            }
            out
        };
        let ng = self.needs(&[x]);
        Ok(self.push(s, data, Op::LogSoftmaxRows { x: x.0, temperature }, false, ng))
    }

    /// Per-row standardization of the trailing dimension followed by an
    /// affine transform: `gain ⊙ (x-μ)/√(σ²+eps) + bias`.
    pub fn layer_norm(&self, x: Val, gain: Val, bias: Val, eps: f64) -> Result<Val, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::BadParameter { what: "eps", value: eps });
        }
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        let (rows, cols) = Self::rows_cols(&sx);
        if sg != vec![cols] || sb != vec![cols] {
            return Err(TensorError::DimMismatch { op: "layer_norm", lhs: sx, rhs: sg });
        }
        let data = {
            let inner = self.inner.borrow();
            let xd = &inner.slots[x.0].data;
            let gd = &inner.slots[gain.0].data;
            let bd = &inner.slots[bias.0].data;
            let mut out = vec![0.0; xd.len()];
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    out[r * cols + c] = gd[c] * (row[c] - mean) * inv + bd[c];
                }
            }
            out
        };
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            sx,
            data,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
            false,
            ng,
        ))
    }

    /// Selects rows of `x` by index; rows may repeat.
    pub fn gather_rows(&self, x: Val, indices: &[usize]) -> Result<Val, TensorError> {
        let s = self.shape(x);
        let (rows, cols) = Self::rows_cols(&s);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: rows });
        }
        let data = {
            let inner = self.inner.borrow();
            let xd = &inner.slots[x.0].data;
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
            }
            out
        };
        let ng = self.needs(&[x]);
        Ok(self.push(
            vec![indices.len(), cols],
            data,
            Op::GatherRows { x: x.0, indices: indices.to_vec() },
            false,
            ng,
        ))
    }

    /// Places row `i` of `x` at row `indices[i]` of a zero matrix with
    /// `out_rows` rows. Indices must be unique.
    pub fn scatter_rows(&self, x: Val, indices: &[usize], out_rows: usize) -> Result<Val, TensorError> {
        let s = self.shape(x);
        let (rows, cols) = Self::rows_cols(&s);
        if indices.len() != rows {
            return Err(TensorError::DimMismatch {
                op: "scatter_rows",
                lhs: s,
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: out_rows });
        }
        let data = {
            let inner = self.inner.borrow();
            let xd = &inner.slots[x.0].data;
            let mut out = vec![0.0; out_rows * cols];
            for (r, &i) in indices.iter().enumerate() {
                out[i * cols..(i + 1) * cols].copy_from_slice(&xd[r * cols..(r + 1) * cols]);
            }
            out
        };
        let ng = self.needs(&[x]);
        Ok(self.push(
            vec![out_rows, cols],
            data,
            Op::ScatterRows { x: x.0, indices: indices.to_vec() },
            false,
            ng,
        ))
    }

    /// Takes columns `[start, start+len)` of a 2-D value.
    pub fn slice_cols(&self, x: Val, start: usize, len: usize) -> Result<Val, TensorError> {
        let s = self.shape(x);
        let (rows, cols) = Self::rows_cols(&s);
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange { index: start + len, bound: cols });
        }
        let data = {
            let inner = self.inner.borrow();
            let xd = &inner.slots[x.0].data;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
            }
            out
        };
        let ng = self.needs(&[x]);
        Ok(self.push(vec![rows, len], data, Op::SliceCols { x: x.0, start, len }, false, ng))
    }

    /// Concatenates 2-D values with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Val]) -> Result<Val, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let rows = shapes[0][0];
        if shapes.iter().any(|s| s.len() != 2 || s[0] != rows) {
            return Err(TensorError::DimMismatch {
                op: "concat_cols",
                lhs: shapes[0].clone(),
                rhs: shapes.last().unwrap().clone(),
            });
        }
        let total_cols: usize = shapes.iter().map(|s| s[1]).sum();
        let data = {
            let inner = self.inner.borrow();
            let mut out = Vec::with_capacity(rows * total_cols);
            for r in 0..rows {
                for (p, s) in parts.iter().zip(&shapes) {
                    let cols = s[1];
                    let xd = &inner.slots[p.0].data;
                    out.extend_from_slice(&xd[r * cols..(r + 1) * cols]);
                }
            }
            out
        };
        let ng = self.needs(parts);
        Ok(self.push(
            vec![rows, total_cols],
            data,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
            false,
            ng,
        ))
    }

    /// Sums every element into a scalar.
    pub fn sum_all(&self, x: Val) -> Val {
        let total: f64 = self.with_value(x, |_, d| d.iter().sum());
        let ng = self.needs(&[x]);
        self.push(vec![1], vec![total], Op::SumAll { x: x.0 }, false, ng)
    }

    /// Mean of every element.
    pub fn mean_all(&self, x: Val) -> Val {
        let n = self.with_value(x, |_, d| d.len());
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Runs reverse accumulation from a scalar loss. Fails on a non-scalar
    /// loss or when the tape already ran backward once.
    pub fn backward(&self, loss: Val) -> Result<Gradients, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.consumed.set(true);

        let inner = self.inner.borrow();
        let n = inner.slots.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let slot = &inner.slots[idx];
            if !slot.needs_grad {
                continue;
            }
            match &slot.op {
                Op::Leaf => {
                    grads[idx] = Some(go); // keep for reporting
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (inner.slots[*a].shape[0], inner.slots[*a].shape[1]);
                    let nn = inner.slots[*b].shape[1];
                    if inner.slots[*a].needs_grad {
                        let bt = transpose_raw(&inner.slots[*b].data, k, nn);
                        let da = matmul_raw(&go, &bt, m, nn, k);
                        accumulate(&mut grads[*a], &da);
                    }
                    if inner.slots[*b].needs_grad {
                        let at = transpose_raw(&inner.slots[*a].data, m, k);
                        let db = matmul_raw(&at, &go, k, m, nn);
                        accumulate(&mut grads[*b], &db);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = Self::rows_cols(&slot.shape);
                    let dx = transpose_raw(&go, r, c);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Add { a, b } => {
                    if inner.slots[*a].needs_grad {
                        accumulate(&mut grads[*a], &go);
                    }
                    if inner.slots[*b].needs_grad {
                        accumulate(&mut grads[*b], &go);
                    }
                }
                Op::Sub { a, b } => {
                    if inner.slots[*a].needs_grad {
                        accumulate(&mut grads[*a], &go);
                    }
                    if inner.slots[*b].needs_grad {
                        let neg: Vec<f64> = go.iter().map(|&v| -v).collect();
                        accumulate(&mut grads[*b], &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if inner.slots[*a].needs_grad {
                        let da: Vec<f64> =
                            go.iter().zip(&inner.slots[*b].data).map(|(&g, &v)| g * v).collect();
                        accumulate(&mut grads[*a], &da);
                    }
                    if inner.slots[*b].needs_grad {
                        let db: Vec<f64> =
                            go.iter().zip(&inner.slots[*a].data).map(|(&g, &v)| g * v).collect();
                        accumulate(&mut grads[*b], &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = go.iter().map(|&g| g * c).collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::AddBias { x, bias } => {
                    let cols = *slot.shape.last().unwrap();
                    if inner.slots[*x].needs_grad {
                        accumulate(&mut grads[*x], &go);
                    }
                    if inner.slots[*bias].needs_grad {
                        let mut db = vec![0.0; cols];
                        for (i, &g) in go.iter().enumerate() {
                            db[i % cols] += g;
                        }
                        accumulate(&mut grads[*bias], &db);
                    }
                }
                Op::Gelu { x } => {
                    let xd = &inner.slots[*x].data;
                    let dx: Vec<f64> = go
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::SoftmaxRows { x, temperature } => {
                    let (rows, cols) = Self::rows_cols(&slot.shape);
                    let sd = &slot.data;
                    let mut dx = vec![0.0; sd.len()];
                    for r in 0..rows {
                        let srow = &sd[r * cols..(r + 1) * cols];
                        let grow = &go[r * cols..(r + 1) * cols];
                        let dot: f64 = srow.iter().zip(grow).map(|(&s, &g)| s * g).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = srow[c] * (grow[c] - dot) / temperature;
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::LogSoftmaxRows { x, temperature } => {
                    let (rows, cols) = Self::rows_cols(&slot.shape);
                    let mut dx = vec![0.0; slot.data.len()];
                    for r in 0..rows {
                        let lrow = &slot.data[r * cols..(r + 1) * cols];
                        let grow = &go[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            dx[r * cols + c] = (grow[c] - lrow[c].exp() * gsum) / temperature;
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (rows, cols) = Self::rows_cols(&slot.shape);
                    let xd = &inner.slots[*x].data;
                    let gd = &inner.slots[*gain].data;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let grow = &go[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(gd).map(|(&g, &gn)| g * gn).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dxx =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxx);
                            dgain[c] += grow[c] * xhat[c];
                            dbias[c] += grow[c];
                        }
                    }
                    if inner.slots[*x].needs_grad {
                        accumulate(&mut grads[*x], &dx);
                    }
                    if inner.slots[*gain].needs_grad {
                        accumulate(&mut grads[*gain], &dgain);
                    }
                    if inner.slots[*bias].needs_grad {
                        accumulate(&mut grads[*bias], &dbias);
                    }
                }
                Op::GatherRows { x, indices } => {
                    let cols = *slot.shape.last().unwrap();
                    let xlen = inner.slots[*x].data.len();
                    let mut dx = vec![0.0; xlen];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] += go[r * cols + c];
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::ScatterRows { x, indices } => {
                    let cols = *slot.shape.last().unwrap();
                    let mut dx = vec![0.0; indices.len() * cols];
                    for (r, &i) in indices.iter().enumerate() {
                        dx[r * cols..(r + 1) * cols].copy_from_slice(&go[i * cols..(i + 1) * cols]);
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::SliceCols { x, start, len } => {
                    let rows = slot.shape[0];
                    let src_cols = *inner.slots[*x].shape.last().unwrap();
                    let mut dx = vec![0.0; inner.slots[*x].data.len()];
                    for r in 0..rows {
                        for c in 0..*len {
                            dx[r * src_cols + start + c] += go[r * len + c];
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::ConcatCols { parts } => {
                    let rows = slot.shape[0];
                    let total_cols = slot.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let cols = *inner.slots[p].shape.last().unwrap();
                        if inner.slots[p].needs_grad {
                            let mut dp = vec![0.0; rows * cols];
                            for r in 0..rows {
                                dp[r * cols..(r + 1) * cols].copy_from_slice(
                                    &go[r * total_cols + offset..r * total_cols + offset + cols],
                                );
                            }
                            accumulate(&mut grads[p], &dp);
                        }
                        offset += cols;
                    }
                }
                Op::SumAll { x } => {
                    let dx = vec![go[0]; inner.slots[*x].data.len()];
                    accumulate(&mut grads[*x], &dx);
                }
            }
        }

        let mut out = HashMap::new();
        for (idx, slot) in inner.slots.iter().enumerate() {
            if slot.requires_grad {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; slot.data.len()]);
                out.insert(idx, Tensor::new(slot.shape.clone(), g).expect("grad shape"));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn softmax_raw(x: &[f64], rows: usize, cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] / temperature - mx).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    out
}
