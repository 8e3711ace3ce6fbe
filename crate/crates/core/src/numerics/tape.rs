//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its output value and the indices of its inputs; `backward`
//! walks the nodes in exact reverse order and accumulates adjoints.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{check_layer_norm, kernels, Tensor};
use super::NumericsError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifier of a learned parameter inside a [`super::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Softmax { x: usize, axis: usize },
    SoftmaxOffDiag(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu(usize),
    Sigmoid(usize),
    Abs(usize),
    Exp(usize),
    LogClamp { x: usize, floor: f64 },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Reshape(usize),
    NormalizeRows(usize),
    Select { x: usize, index: usize },
    Dot(usize, usize),
    Cox { r: usize, times: Vec<f64>, events: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner operation record. Not shared across threads.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a registered parameter, if it influenced the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient with respect to any recorded value (zeros when unreachable).
    pub fn wrt(&self, tape: &Tape, var: Var) -> Result<Tensor, NumericsError> {
        if var.tape != self.tape || var.tape != tape.id {
            return Err(NumericsError::Usage("variable belongs to a different tape".into()));
        }
        let shape = tape.nodes[var.index].value.shape().to_vec();
        let data = match &self.nodes.get(var.index) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; shape.iter().product()],
        };
        Tensor::new(shape, data)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-event log-sum-exp over the Breslow risk set `{j : T_j >= T_i}`.
fn cox_log_denominators(r: &[f64], times: &[f64], events: &[bool]) -> Vec<Option<f64>> {
    (0..r.len())
        .map(|i| {
            if !events[i] {
                return None;
            }
            let max = (0..r.len())
                .filter(|&j| times[j] >= times[i])
                .map(|j| r[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..r.len())
                .filter(|&j| times[j] >= times[i])
                .map(|j| (r[j] - max).exp())
                .sum();
            Some(max + total.ln())
        })
        .collect()
}

/// Negative Cox partial log-likelihood; 0 when nobody had an event.
pub(crate) fn cox_value(r: &[f64], times: &[f64], events: &[bool]) -> f64 {
    cox_log_denominators(r, times, events)
        .iter()
        .enumerate()
        .filter_map(|(i, lse)| lse.map(|l| -(r[i] - l)))
        .sum()
}

fn cox_grad(r: &[f64], times: &[f64], events: &[bool]) -> Vec<f64> {
    let lse = cox_log_denominators(r, times, events);
    let mut g = vec![0.0; r.len()];
    for (i, l) in lse.iter().enumerate() {
        let Some(l) = l else { continue };
        g[i] -= 1.0;
        for j in 0..r.len() {
            if times[j] >= times[i] {
                g[j] += (r[j] - l).exp();
            }
        }
    }
    g
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericsError::Usage("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, NumericsError> {
        Ok(self.val(self.idx(v)?))
    }

    pub fn scalar(&self, v: Var) -> Result<f64, NumericsError> {
        self.value(v)?.as_scalar()
    }

    /// Records a constant (no gradient is reported for it by parameter id).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(id))
    }

    fn matrix_dims(&self, i: usize, op: &str) -> Result<(usize, usize), NumericsError> {
        match self.val(i).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(NumericsError::Shape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: usize, b: usize, op: &str) -> Result<(), NumericsError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(NumericsError::Shape(format!(
                "{op}: shapes differ: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = self.val(ai).matmul(self.val(bi))?;
        Ok(self.push(value, Op::MatMul(ai, bi)))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix_dims(ai, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(bi, "matmul_nt")?;
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul_nt widths differ: {:?} x {:?}ᵀ",
                self.val(ai).shape(),
                self.val(bi).shape()
            )));
        }
        let out = kernels::matmul_nt(self.val(ai).data(), self.val(bi).data(), m, k, n);
        let value = Tensor::from_kernel(vec![m, n], out, "matmul_nt")?;
        Ok(self.push(value, Op::MatMulNT(ai, bi)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ai = self.idx(a)?;
        let value = self.val(ai).transpose()?;
        Ok(self.push(value, Op::Transpose(ai)))
    }

    fn zip(&mut self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, op)?;
        let data = self.val(ai).data().iter().zip(self.val(bi).data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_kernel(self.val(ai).shape().to_vec(), data, op)?;
        Ok((ai, bi, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi, v) = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi, v) = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi, v) = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ai, bi)))
    }

    /// Adds a row vector (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (xi, ri) = (self.idx(x)?, self.idx(row)?);
        let cols = self.val(xi).cols();
        if self.val(ri).numel() != cols {
            return Err(NumericsError::Shape(format!(
                "add_row: row {:?} does not match columns of {:?}",
                self.val(ri).shape(),
                self.val(xi).shape()
            )));
        }
        let r = self.val(ri).data();
        let data = self.val(xi).data().chunks(cols).flat_map(|row| row.iter().zip(r).map(|(a, b)| a + b)).collect();
        let value = Tensor::from_kernel(self.val(xi).shape().to_vec(), data, "add_row")?;
        Ok(self.push(value, Op::AddRow(xi, ri)))
    }

    fn map(&mut self, x: Var, op: &str, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor), NumericsError> {
        let xi = self.idx(x)?;
        let data = self.val(xi).data().iter().map(|v| f(*v)).collect();
        let value = Tensor::from_kernel(self.val(xi).shape().to_vec(), data, op)?;
        Ok((xi, value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let (xi, v) = self.map(x, "scale", |a| a * c)?;
        Ok(self.push(v, Op::Scale(xi, c)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (xi, v) = self.map(x, "gelu", gelu)?;
        Ok(self.push(v, Op::Gelu(xi)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (xi, v) = self.map(x, "sigmoid", sigmoid)?;
        Ok(self.push(v, Op::Sigmoid(xi)))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (xi, v) = self.map(x, "abs", f64::abs)?;
        Ok(self.push(v, Op::Abs(xi)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (xi, v) = self.map(x, "exp", f64::exp)?;
        Ok(self.push(v, Op::Exp(xi)))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var, NumericsError> {
        if !(floor > 0.0) {
            return Err(NumericsError::Config(format!("log floor must be positive, got {floor}")));
        }
        let (xi, v) = self.map(x, "log", |a| a.max(floor).ln())?;
        Ok(self.push(v, Op::LogClamp { x: xi, floor }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let value = self.val(xi).softmax(axis)?;
        Ok(self.push(value, Op::Softmax { x: xi, axis }))
    }

    /// Row-wise softmax of a square matrix that leaves the diagonal out of
    /// every normaliser; diagonal outputs are exactly zero.
    pub fn softmax_off_diagonal(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let (n, m) = self.matrix_dims(xi, "softmax_off_diagonal")?;
        if n != m || n < 2 {
            return Err(NumericsError::Shape(format!(
                "softmax_off_diagonal needs a square matrix with at least 2 rows, got {:?}",
                self.val(xi).shape()
            )));
        }
        let src = self.val(xi).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &src[i * n..(i + 1) * n];
            let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                total += e;
            }
            for j in (0..n).filter(|&j| j != i) {
                out[i * n + j] /= total;
            }
        }
        let value = Tensor::from_kernel(vec![n, n], out, "softmax_off_diagonal")?;
        Ok(self.push(value, Op::SoftmaxOffDiag(xi)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        check_layer_norm(self.val(xi), self.val(gi), self.val(bi), eps)?;
        let (out, _) = kernels::layer_norm(
            self.val(xi).data(),
            self.val(gi).data(),
            self.val(bi).data(),
            self.val(xi).cols(),
            eps,
        );
        let value = Tensor::from_kernel(self.val(xi).shape().to_vec(), out, "layer_norm")?;
        Ok(self.push(value, Op::LayerNorm { x: xi, gain: gi, bias: bi, eps }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let value = Tensor::from_kernel(vec![1], vec![self.val(xi).data().iter().sum()], "sum")?;
        Ok(self.push(value, Op::Sum(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let value = Tensor::from_kernel(vec![1], vec![t.data().iter().sum::<f64>() / t.numel() as f64], "mean")?;
        Ok(self.push(value, Op::Mean(xi)))
    }

    /// Column means of a matrix, as a 1×cols matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let (m, n) = self.matrix_dims(xi, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.val(xi).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let value = Tensor::from_kernel(vec![1, n], out, "mean_rows")?;
        Ok(self.push(value, Op::MeanRows(xi)))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Shape("concat_rows of nothing".into()));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let cols = self.matrix_dims(idxs[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idxs {
            let (r, c) = self.matrix_dims(i, "concat_rows")?;
            if c != cols {
                return Err(NumericsError::Shape(format!(
                    "concat_rows: column counts differ ({c} vs {cols})"
                )));
            }
            rows += r;
            data.extend_from_slice(self.val(i).data());
        }
        let value = Tensor::from_kernel(vec![rows, cols], data, "concat_rows")?;
        Ok(self.push(value, Op::ConcatRows(idxs)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let (m, n) = self.matrix_dims(xi, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(NumericsError::Shape(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = self.val(xi).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::from_kernel(vec![len, n], data, "slice_rows")?;
        Ok(self.push(value, Op::SliceRows { x: xi, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let value = self.val(xi).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(xi)))
    }

    /// Scales every row to unit L2 norm. Zero rows are a domain error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let n = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        for (r, row) in t.data().chunks(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumericsError::Domain(format!("row {r} has zero norm")));
            }
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::from_kernel(t.shape().to_vec(), out, "normalize_rows")?;
        Ok(self.push(value, Op::NormalizeRows(xi)))
    }

    /// Picks one entry (flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var, NumericsError> {
        let xi = self.idx(x)?;
        let v = *self.val(xi).data().get(index).ok_or_else(|| {
            NumericsError::Shape(format!("select index {index} out of range"))
        })?;
        let value = Tensor::from_kernel(vec![1], vec![v], "select")?;
        Ok(self.push(value, Op::Select { x: xi, index }))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).numel() != self.val(bi).numel() {
            return Err(NumericsError::Shape(format!(
                "dot: sizes differ: {:?} vs {:?}",
                self.val(ai).shape(),
                self.val(bi).shape()
            )));
        }
        let s = self.val(ai).data().iter().zip(self.val(bi).data()).map(|(x, y)| x * y).sum();
        let value = Tensor::from_kernel(vec![1], vec![s], "dot")?;
        Ok(self.push(value, Op::Dot(ai, bi)))
    }

    /// Negative Cox partial log-likelihood of risk scores `r` (Breslow ties).
    pub fn cox_partial(&mut self, r: Var, times: &[f64], events: &[bool]) -> Result<Var, NumericsError> {
        let ri = self.idx(r)?;
        let n = self.val(ri).numel();
        if times.len() != n || events.len() != n {
            return Err(NumericsError::Shape(format!(
                "cox: {n} risks but {} times and {} indicators",
                times.len(),
                events.len()
            )));
        }
        let v = cox_value(self.val(ri).data(), times, events);
        let value = Tensor::from_kernel(vec![1], vec![v], "cox")?;
        Ok(self.push(
            value,
            Op::Cox {
                r: ri,
                times: times.to_vec(),
                events: events.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let li = self.idx(loss)?;
        if self.val(li).numel() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(li).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, g: impl IntoIterator<Item = f64>) {
            match &mut grads[i] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g.into_iter().collect()),
            }
        }

        for idx in (0..=li).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = node.value.data();
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = self.matrix_dims(*a, "matmul")?;
                    let n = self.val(*b).cols();
                    let da = kernels::matmul_nt(&g, self.val(*b).data(), m, n, k);
                    let db = kernels::matmul_tn(self.val(*a).data(), &g, m, k, n);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.matrix_dims(*a, "matmul_nt")?;
                    let n = self.val(*b).rows();
                    let da = kernels::matmul(&g, self.val(*b).data(), m, n, k);
                    let db = kernels::matmul_tn(&g, self.val(*a).data(), m, n, k);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.matrix_dims(*a, "transpose")?;
                    acc(&mut grads, *a, kernels::transpose(&g, n, m));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.iter().copied());
                    acc(&mut grads, *b, g.iter().copied());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.iter().copied());
                    acc(&mut grads, *b, g.iter().map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    let da: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, r) => {
                    let n = self.val(*r).numel();
                    let mut dr = vec![0.0; n];
                    for row in g.chunks(n) {
                        dr.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(&mut grads, *x, g.iter().copied());
                    acc(&mut grads, *r, dr);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g.iter().map(|v| v * c)),
                Op::Softmax { x, axis } => {
                    let shape = node.value.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dotp: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxOffDiag(x) => {
                    // diagonal outputs are zero, so the plain row-softmax
                    // adjoint already leaves them out
                    let n = node.value.cols();
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..n {
                        let row = i * n..(i + 1) * n;
                        let dotp: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            dx[j] = y[j] * (g[j] - dotp);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.val(*x);
                    let n = xv.cols();
                    let gv = self.val(*gain).data();
                    let (_, stats) = kernels::layer_norm(xv.data(), gv, self.val(*bias).data(), n, *eps);
                    let mut dx = vec![0.0; xv.numel()];
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (r, (mean, rstd)) in stats.iter().enumerate() {
                        let xs = &xv.data()[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * rstd).collect();
                        let dxhat: Vec<f64> = gs.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dg[j] += gs[j] * xhat[j];
                            db[j] += gs[j];
                            dx[r * n + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::Gelu(x) => {
                    let xv = self.val(*x).data();
                    acc(&mut grads, *x, g.iter().zip(xv).map(|(g, x)| g * gelu_grad(*x)));
                }
                Op::Sigmoid(x) => acc(&mut grads, *x, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s))),
                Op::Abs(x) => {
                    let xv = self.val(*x).data();
                    acc(&mut grads, *x, g.iter().zip(xv).map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }));
                }
                Op::Exp(x) => acc(&mut grads, *x, g.iter().zip(y).map(|(g, e)| g * e)),
                Op::LogClamp { x, floor } => {
                    let xv = self.val(*x).data();
                    acc(&mut grads, *x, g.iter().zip(xv).map(|(g, x)| if *x > *floor { g / x } else { 0.0 }));
                }
                Op::Sum(x) => {
                    let n = self.val(*x).numel();
                    acc(&mut grads, *x, std::iter::repeat_n(g[0], n));
                }
                Op::Mean(x) => {
                    let n = self.val(*x).numel();
                    acc(&mut grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
                }
                Op::MeanRows(x) => {
                    let (m, _) = self.matrix_dims(*x, "mean_rows")?;
                    let row: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
                    acc(&mut grads, *x, (0..m).flat_map(|_| row.iter().copied()));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.val(p).numel();
                        acc(&mut grads, p, g[offset..offset + n].iter().copied());
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.val(*x);
                    let n = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    dx[start * n..start * n + g.len()].copy_from_slice(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => acc(&mut grads, *x, g.iter().copied()),
                Op::NormalizeRows(x) => {
                    let xv = self.val(*x);
                    let n = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    for (r, row) in xv.data().chunks(n).enumerate() {
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let proj: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = (gs[j] - ys[j] * proj) / norm;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Select { x, index } => {
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    dx[*index] = g[0];
                    acc(&mut grads, *x, dx);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    let da: Vec<f64> = bv.iter().map(|v| v * g[0]).collect();
                    let db: Vec<f64> = av.iter().map(|v| v * g[0]).collect();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Cox { r, times, events } => {
                    let dr = cox_grad(self.val(*r).data(), times, events);
                    acc(&mut grads, *r, dr.into_iter().map(|v| v * g[0]));
                }
            }
            grads[idx] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes[..=li].iter().enumerate() {
            if let Op::Param(id) = node.op {
                let Some(g) = &grads[i] else { continue };
                if let Some(existing) = params.get_mut(&id) {
                    existing.data_mut().iter_mut().zip(g).for_each(|(e, v)| *e += v);
                } else {
                    params.insert(id, Tensor::new(node.value.shape().to_vec(), g.clone())?);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }
}
