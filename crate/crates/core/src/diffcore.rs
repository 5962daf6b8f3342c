//! Dense double-precision tensors with tape-based reverse-mode gradients.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and accumulates
//! exact analytic gradients into every variable that needs one. Gradients are
//! accumulated in a fixed order, so identical inputs give bit-identical
//! gradients.
//!
//! Only rank-0, rank-1, and rank-2 tensors are used. Matrix operations take
//! explicit shapes; the only broadcast is adding a row-vector bias.

use crate::error::{ensure_input, Error, Result};

/// Added to row norms before dividing, so zero rows stay finite.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure_input!(
            numel == data.len(),
            "shape {shape:?} needs {numel} values, got {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_input!(r.as_ref().len() == cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LogSoftmaxRows(Var),
    CosineMatrix {
        a: Var,
        b: Var,
        a_hat: Tensor,
        b_hat: Tensor,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MaskedMean(Var, Vec<bool>),
    WeightedSum(Var, Vec<f64>),
    MaskedLogSumExpRows(Var, Vec<bool>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded recording context.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    /// Record an input. Gradients are kept for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Forget accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs))
    }

    fn matrix_of(&self, v: Var, op: &str) -> Result<&Tensor> {
        let t = &self.nodes[v.0].value;
        ensure_input!(t.is_matrix(), "{op} expects a matrix, got shape {:?}", t.shape);
        Ok(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix_of(a, "matmul")?, self.matrix_of(b, "matmul")?);
        ensure_input!(
            ta.cols() == tb.rows(),
            "matmul shape mismatch {:?} x {:?}",
            ta.shape,
            tb.shape
        );
        let out = matmul_nn(ta, tb);
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose(self.matrix_of(a, "transpose")?);
        self.record("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_input!(ta.shape == tb.shape, "add shape mismatch {:?} + {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_input!(ta.shape == tb.shape, "sub shape mismatch {:?} - {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Add a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ta = self.matrix_of(a, "add_row")?;
        let tb = self.value(bias);
        ensure_input!(
            tb.numel() == ta.cols(),
            "bias of {} values for {} columns",
            tb.numel(),
            ta.cols()
        );
        let cols = ta.cols();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(k, x)| x + tb.data[k % cols])
            .collect();
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.record("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| c * x).collect())?;
        self.record("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.max(0.0)).collect())?;
        self.record("relu", out, Op::Relu(a), &[a])
    }

    /// Row-wise log-softmax of a matrix.
    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.matrix_of(a, "row_log_softmax")?;
        let cols = ta.cols();
        ensure_input!(cols > 0, "row_log_softmax over zero columns");
        let mut data = Vec::with_capacity(ta.numel());
        for i in 0..ta.rows() {
            let row = ta.row(i);
            let lse = logsumexp(row.iter().copied());
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(ta.shape.clone(), data)?;
        self.record("row_log_softmax", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Pairwise cosine similarities between the rows of `a` (m x d) and `b`
    /// (n x d), with [`NORM_EPS`] added to each norm.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (
            self.matrix_of(a, "cosine_similarity_matrix")?,
            self.matrix_of(b, "cosine_similarity_matrix")?,
        );
        ensure_input!(
            ta.cols() == tb.cols(),
            "cosine similarity width mismatch {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let (a_hat, a_norm) = normalize_rows(ta);
        let (b_hat, b_norm) = normalize_rows(tb);
        let out = matmul_nt(&a_hat, &b_hat);
        let op = Op::CosineMatrix {
            a,
            b,
            a_hat,
            b_hat,
            a_norm,
            b_norm,
        };
        self.record("cosine_similarity_matrix", out, op, &[a, b])
    }

    /// Divide each row by its Euclidean norm plus [`NORM_EPS`].
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (out, norms) = normalize_rows(self.matrix_of(a, "l2_normalize_rows")?);
        self.record("l2_normalize_rows", out, Op::NormalizeRows { x: a, norms }, &[a])
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.matrix_of(a, "gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * ta.cols());
        for &i in idx {
            ensure_input!(i < ta.rows(), "gather_rows index {i} out of {} rows", ta.rows());
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::matrix(idx.len(), ta.cols(), data)?;
        self.record("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Element `a[i, idx[i]]` of each row, as a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.matrix_of(a, "pick")?;
        ensure_input!(idx.len() == ta.rows(), "pick needs one index per row");
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            ensure_input!(j < ta.cols(), "pick index {j} out of {} columns", ta.cols());
            data.push(ta.row(i)[j]);
        }
        self.record("pick", Tensor::vector(data), Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Mean over the entries where `mask` is set; zero when the mask is empty.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        ensure_input!(mask.len() == ta.numel(), "mask length {} for {} values", mask.len(), ta.numel());
        let count = mask.iter().filter(|&&m| m).count();
        let v = if count == 0 {
            0.0
        } else {
            ta.data.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum::<f64>() / count as f64
        };
        self.record("masked_mean", Tensor::scalar(v), Op::MaskedMean(a, mask.to_vec()), &[a])
    }

    /// `sum_k w[k] * a[k]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        ensure_input!(
            weights.len() == ta.numel(),
            "{} weights for {} values",
            weights.len(),
            ta.numel()
        );
        let v = ta.data.iter().zip(weights).map(|(x, w)| x * w).sum();
        self.record("weighted_sum", Tensor::scalar(v), Op::WeightedSum(a, weights.to_vec()), &[a])
    }

    /// Per-row `log sum_j exp(a[i, j])` over entries with `mask[i, j]` set.
    /// Rows with no selected entry yield 0 and pass no gradient.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.matrix_of(a, "masked_logsumexp_rows")?;
        ensure_input!(mask.len() == ta.numel(), "mask length {} for {} values", mask.len(), ta.numel());
        let cols = ta.cols();
        let data = (0..ta.rows())
            .map(|i| {
                let m = &mask[i * cols..(i + 1) * cols];
                if m.iter().any(|&x| x) {
                    logsumexp(ta.row(i).iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| *x))
                } else {
                    0.0
                }
            })
            .collect();
        let op = Op::MaskedLogSumExpRows(a, mask.to_vec());
        self.record("masked_logsumexp_rows", Tensor::vector(data), op, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data.iter().sum();
        self.record("sum", Tensor::scalar(v), Op::Sum(a), &[a])
    }

    /// Accumulate d(output)/d(v) for every recorded `v` that needs a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        ensure_input!(
            self.nodes[output.0].value.numel() == 1,
            "backward needs a scalar output, got shape {:?}",
            self.nodes[output.0].value.shape
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_done = true;
        if !self.nodes[output.0].needs_grad {
            return Ok(());
        }
        let shape = self.nodes[output.0].value.shape.clone();
        self.grads[output.0] = Some(Tensor::new(shape, vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.needs_grad {
                *grad = None;
            }
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.data.iter().any(|x| !x.is_finite()) {
                    return Err(Error::numeric("backward", format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.data.iter_mut().zip(&delta.data).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let node = &self.nodes[idx];
        let mut updates: Vec<(Var, Tensor)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    updates.push((*a, matmul_nt(g, tb)));
                }
                if self.needs(*b) {
                    updates.push((*b, matmul_tn(ta, g)));
                }
            }
            Op::Transpose(a) => updates.push((*a, transpose(g))),
            Op::Add(a, b) => {
                updates.push((*a, g.clone()));
                updates.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, g.clone()));
                updates.push((*b, map(g, |x| -x)));
            }
            Op::AddRow(a, bias) => {
                updates.push((*a, g.clone()));
                let tb = &self.nodes[bias.0].value;
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for i in 0..g.rows() {
                    db.iter_mut().zip(g.row(i)).for_each(|(d, x)| *d += x);
                }
                updates.push((*bias, Tensor::new(tb.shape.clone(), db).expect("bias shape")));
            }
            Op::Scale(a, c) => updates.push((*a, map(g, |x| c * x))),
            Op::Relu(a) => {
                let ta = &self.nodes[a.0].value;
                let data = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                updates.push((*a, Tensor::new(g.shape.clone(), data).expect("relu shape")));
            }
            Op::LogSoftmaxRows(a) => {
                // dx = dy - softmax * sum(dy)
                let y = &node.value;
                let mut data = Vec::with_capacity(y.numel());
                for i in 0..y.rows() {
                    let gs: f64 = g.row(i).iter().sum();
                    data.extend(g.row(i).iter().zip(y.row(i)).map(|(d, l)| d - l.exp() * gs));
                }
                updates.push((*a, Tensor::new(y.shape.clone(), data).expect("softmax shape")));
            }
            Op::CosineMatrix {
                a,
                b,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
            } => {
                if self.needs(*a) {
                    let d_ahat = matmul_nn(g, b_hat);
                    let x = &self.nodes[a.0].value;
                    updates.push((*a, normalize_rows_backward(x, a_hat, a_norm, &d_ahat)));
                }
                if self.needs(*b) {
                    let d_bhat = matmul_tn(g, a_hat);
                    let x = &self.nodes[b.0].value;
                    updates.push((*b, normalize_rows_backward(x, b_hat, b_norm, &d_bhat)));
                }
            }
            Op::NormalizeRows { x, norms } => {
                let tx = &self.nodes[x.0].value;
                updates.push((*x, normalize_rows_backward(tx, &node.value, norms, g)));
            }
            Op::GatherRows(a, idx_list) => {
                let ta = &self.nodes[a.0].value;
                let mut d = Tensor::zeros(&ta.shape);
                let cols = ta.cols();
                for (r, &src) in idx_list.iter().enumerate() {
                    let dst = &mut d.data[src * cols..(src + 1) * cols];
                    dst.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                }
                updates.push((*a, d));
            }
            Op::Pick(a, idx_list) => {
                let ta = &self.nodes[a.0].value;
                let mut d = Tensor::zeros(&ta.shape);
                let cols = ta.cols();
                for (i, &j) in idx_list.iter().enumerate() {
                    d.data[i * cols + j] += g.data[i];
                }
                updates.push((*a, d));
            }
            Op::MaskedMean(a, mask) => {
                let ta = &self.nodes[a.0].value;
                let count = mask.iter().filter(|&&m| m).count();
                let mut d = Tensor::zeros(&ta.shape);
                if count > 0 {
                    let w = g.item() / count as f64;
                    d.data.iter_mut().zip(mask).filter(|(_, &m)| m).for_each(|(x, _)| *x = w);
                }
                updates.push((*a, d));
            }
            Op::WeightedSum(a, weights) => {
                let ta = &self.nodes[a.0].value;
                let s = g.item();
                let data = weights.iter().map(|w| w * s).collect();
                updates.push((*a, Tensor::new(ta.shape.clone(), data).expect("weights shape")));
            }
            Op::MaskedLogSumExpRows(a, mask) => {
                let ta = &self.nodes[a.0].value;
                let cols = ta.cols();
                let mut d = Tensor::zeros(&ta.shape);
                for i in 0..ta.rows() {
                    let m = &mask[i * cols..(i + 1) * cols];
                    if !m.iter().any(|&x| x) {
                        continue;
                    }
                    let lse = node.value.data[i];
                    for j in 0..cols {
                        if m[j] {
                            d.data[i * cols + j] = g.data[i] * (ta.row(i)[j] - lse).exp();
                        }
                    }
                }
                updates.push((*a, d));
            }
            Op::Sum(a) => {
                let ta = &self.nodes[a.0].value;
                let s = g.item();
                updates.push((*a, Tensor::new(ta.shape.clone(), vec![s; ta.numel()]).expect("sum")));
            }
        }
        for (v, delta) in updates {
            self.accumulate(v, delta);
        }
    }
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op, format!("non-finite value in output of shape {:?}", t.shape)))
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `a (m x k) * b (k x n)`
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a.data[i * k + p];
            if x == 0.0 {
                continue;
            }
            let src = &b.data[p * n..(p + 1) * n];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += x * s);
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a (m x k) * b^T` where `b` is `n x k`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ra = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let rb = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ra = &a.data[p * m..(p + 1) * m];
        let rb = &b.data[p * n..(p + 1) * n];
        for (i, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let dst = &mut out[i * n..(i + 1) * n];
            dst.iter_mut().zip(rb).for_each(|(d, s)| *d += x * s);
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

fn normalize_rows(a: &Tensor) -> (Tensor, Vec<f64>) {
    let cols = a.cols();
    let mut norms = Vec::with_capacity(a.rows());
    let mut data = Vec::with_capacity(a.numel());
    for i in 0..a.rows() {
        let row = a.row(i);
        let r = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        norms.push(r);
        let denom = r + NORM_EPS;
        data.extend(row.iter().map(|x| x / denom));
    }
    (
        Tensor {
            shape: vec![a.rows(), cols],
            data,
        },
        norms,
    )
}

/// Backward of `y = x / (|x| + eps)` row by row:
/// `dx = dy / n - x (x . dy) / (|x| n^2)` with `n = |x| + eps`.
fn normalize_rows_backward(x: &Tensor, _y: &Tensor, norms: &[f64], dy: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for (i, &r) in norms.iter().enumerate() {
        let n = r + NORM_EPS;
        let xr = &x.data[i * cols..(i + 1) * cols];
        let dr = &dy.data[i * cols..(i + 1) * cols];
        let dot: f64 = xr.iter().zip(dr).map(|(a, b)| a * b).sum();
        let coef = if r > 0.0 { dot / (r * n * n) } else { 0.0 };
        data.extend(xr.iter().zip(dr).map(|(xv, dv)| dv / n - xv * coef));
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_of_self_has_unit_diagonal() {
        let mut g = Graph::new();
        let a = g.leaf(m(3, 2, &[1.0, 2.0, -3.0, 0.5, 0.1, 0.0]), false).unwrap();
        let c = g.cosine_similarity_matrix(a, a).unwrap();
        for i in 0..3 {
            assert!((g.value(c).row(i)[i] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn scale_gradient_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]), true).unwrap();
        let y = g.scale(x, -0.75).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-0.75, -0.75, -0.75]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn empty_mask_mean_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let mm = g.masked_mean(x, &[false, false]).unwrap();
        assert_eq!(g.value(mm).item(), 0.0);
        g.backward(mm).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_softmax_pick_matches_softmax_minus_onehot() {
        let logits = [0.2, -1.0, 1.5];
        let mut g = Graph::new();
        let x = g.leaf(m(1, 3, &logits), true).unwrap();
        let lp = g.row_log_softmax(x).unwrap();
        let picked = g.pick(lp, &[2]).unwrap();
        let loss = g.scale(picked, -1.0).unwrap();
        let loss = g.sum(loss).unwrap();
        g.backward(loss).unwrap();
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let expected: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(j, v)| v.exp() / z - if j == 2 { 1.0 } else { 0.0 })
            .collect();
        for (a, b) in g.grad(x).unwrap().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn double_backward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::State(_))));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Input(_))));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_reported() {
        let mut g = Graph::new();
        let a = g.leaf(m(2, 3, &[0.0; 6]), false).unwrap();
        let b = g.leaf(m(2, 3, &[0.0; 6]), false).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Input(_))));
        let big = g.leaf(Tensor::scalar(1e308), false).unwrap();
        match g.scale(big, 10.0) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "scale"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert!(g.leaf(Tensor::scalar(f64::NAN), true).is_err());
    }

    #[test]
    fn masked_logsumexp_skips_empty_rows() {
        let mut g = Graph::new();
        let x = g.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let l = g.masked_logsumexp_rows(x, &[true, true, false, false]).unwrap();
        let v = g.value(l).data().to_vec();
        assert!((v[0] - (1f64.exp() + 2f64.exp()).ln()).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        let s = g.sum(l).unwrap();
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap().data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn gradients_are_bitwise_repeatable() {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(m(2, 3, &[0.3, -0.2, 0.9, 1.1, 0.4, -0.7]), true).unwrap();
            let b = g.leaf(m(3, 2, &[0.5, 0.1, -0.3, 0.8, 0.2, -0.6]), true).unwrap();
            let c = g.matmul(a, b).unwrap();
            let lp = g.row_log_softmax(c).unwrap();
            let s = g.sum(lp).unwrap();
            g.backward(s).unwrap();
            (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
