//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; inputs always precede the
//! node that consumes them, so [`Tape::backward`] simply walks the node list in
//! reverse. [`Var`] is a plain index into the tape and is `Copy`.
//!
//! Binary operations broadcast only in the restricted sense used throughout
//! the crate: equal shapes, or one operand is a `1×n` row / `m×1` column that
//! matches the other operand's corresponding dimension.

use rand::Rng;

use crate::numeric::{gauss_cdf, gauss_interval, gauss_pdf, sigmoid, softplus};
use crate::tensor::{matmul_into, Result, Tensor, TensorError};

/// Probability floor applied inside [`Tape::ordinal_nll`].
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    GaussCdf,
    Log,
    Neg,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// How an operand of a binary op is expanded to the output shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expand {
    Full,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ea: Expand,
        eb: Expand,
    },
    Unary(Unary, Var),
    Scale(Var, f64),
    AddConst(Var),
    SumAll(Var),
    SumRows(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAdd {
        x: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Dropout(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    OrdinalNll {
        s: Var,
        alpha: Var,
        labels: Vec<usize>,
        /// Per-row `(∂nll/∂lo, ∂nll/∂hi)` with respect to the shifted bounds.
        dlo_dhi: Vec<(f64, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    numerics_warnings: usize,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
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

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    /// Number of probability-floor clamps applied so far.
    pub fn numerics_warnings(&self) -> usize {
        self.numerics_warnings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push(value, Op::Matmul(a, b), "matmul", &[a, b])
    }

    fn expand_modes(op: &'static str, ta: &Tensor, tb: &Tensor) -> Result<(Expand, Expand, usize, usize)> {
        if !is_matrix(ta) || !is_matrix(tb) {
            return Err(shape_err(op, ta, tb));
        }
        let (ar, ac, br, bc) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if ar == br && ac == bc {
            return Ok((Expand::Full, Expand::Full, ar, ac));
        }
        if br == 1 && bc == ac {
            return Ok((Expand::Full, Expand::Row, ar, ac));
        }
        if bc == 1 && br == ar {
            return Ok((Expand::Full, Expand::Col, ar, ac));
        }
        if ar == 1 && ac == bc {
            return Ok((Expand::Row, Expand::Full, br, bc));
        }
        if ac == 1 && ar == br {
            return Ok((Expand::Col, Expand::Full, br, bc));
        }
        Err(shape_err(op, ta, tb))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let (ea, eb, rows, cols) = Self::expand_modes(name, ta, tb)?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = da[expand_index(ea, i, j, cols)];
                let y = db[expand_index(eb, i, j, cols)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                });
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push(value, Op::Binary { kind, a, b, ea, eb }, name, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            Unary::Relu => ("relu", |x| x.max(0.0)),
            Unary::Tanh => ("tanh", f64::tanh),
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::GaussCdf => ("gauss_cdf", gauss_cdf),
            Unary::Log => ("log", f64::ln),
            Unary::Neg => ("neg", |x| -x),
            Unary::Softplus => ("softplus", softplus),
        };
        if kind == Unary::Log {
            if let Some(bad) = ta.data().iter().find(|&&x| !(x > 0.0)) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let value = ta.map(f);
        self.push(value, Op::Unary(kind, a), name, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn gauss_cdf(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::GaussCdf, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), "scale", &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst(a), "add_const", &[a])
    }

    /// Sum of every entry, as a `1×1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), "sum_all", &[a])
    }

    /// Column sums (`m×n → 1×n`).
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let value = column_sums(self.value(a));
        self.push(value, Op::SumRows(a), "sum_rows", &[a])
    }

    /// Column means (`m×n → 1×n`). Errors on an empty matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let m = ta.rows();
        if m == 0 {
            return Err(TensorError::Contract("mean over zero rows".into()));
        }
        let value = column_sums(ta).map(|x| x / m as f64);
        self.push(value, Op::MeanRows(a), "mean_rows", &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || !is_matrix(t) {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols", parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || !is_matrix(t) {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, out)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), "concat_rows", parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(TensorError::Contract(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                ta.shape()
            )));
        }
        let rows = ta.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            out.extend_from_slice(&ta.row_slice(i)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, out)?;
        self.push(value, Op::SliceCols(a, start), "slice_cols", &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= ta.rows() {
                return Err(TensorError::Contract(format!(
                    "gather index {i} out of range for {} rows",
                    ta.rows()
                )));
            }
            out.extend_from_slice(ta.row_slice(i));
        }
        let value = Tensor::matrix(index.len(), cols, out)?;
        self.push(value, Op::GatherRows(a, index.to_vec()), "gather_rows", &[a])
    }

    /// `out[dst[e]] += x[src[e]]` over an `n_out`-row output.
    pub fn scatter_add(&mut self, x: Var, src: &[usize], dst: &[usize], n_out: usize) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if src.len() != dst.len() {
            return Err(TensorError::Contract("scatter_add index lengths differ".into()));
        }
        let mut out = vec![0.0; n_out * cols];
        for (&s, &d) in src.iter().zip(dst) {
            if s >= tx.rows() || d >= n_out {
                return Err(TensorError::Contract(format!("scatter_add edge ({s},{d}) out of range")));
            }
            let row = tx.row_slice(s);
            for (o, &v) in out[d * cols..(d + 1) * cols].iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::matrix(n_out, cols, out)?;
        self.push(
            value,
            Op::ScatterAdd {
                x,
                src: src.to_vec(),
                dst: dst.to_vec(),
            },
            "scatter_add",
            &[x],
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(vec![rows, cols])?;
        self.push(value, Op::Reshape(a), "reshape", &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose", &[a])
    }

    /// Inverted dropout. Identity (no node recorded) when `train` is false
    /// or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::Contract(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 - p;
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Dropout(a, mask), "dropout", &[a])
    }

    /// Training-mode batch normalization over rows of `x` (`B×d`).
    /// Returns the output and the batch mean / biased variance per column.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let (b, d) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if b == 0 || tg.shape() != [1, d] || tb.shape() != [1, d] {
            return Err(shape_err("batch_norm", tx, tg));
        }
        let mean: Vec<f64> = column_sums(tx).map(|s| s / b as f64).into_data();
        let mut var = vec![0.0; d];
        for i in 0..b {
            for (j, v) in var.iter_mut().enumerate() {
                let c = tx.get(i, j) - mean[j];
                *v += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let h = (tx.get(i, j) - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::matrix(b, d, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "batch_norm",
            &[x, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    /// Per-row negative log-likelihood of the Gaussian cumulative-link model.
    ///
    /// `s` is `B×1` latent scores, `alpha` is `1×(K−1)` non-decreasing
    /// thresholds and `labels[i] ∈ 0..K`. Row `i` of the `B×1` output is
    /// `−ln(Φ(α_y − s_i) − Φ(α_{y−1} − s_i))` with `α_{−1} = −∞`,
    /// `α_{K−1} = +∞`. Probabilities below [`PROB_FLOOR`] are clamped (the
    /// row then contributes no gradient) and counted in
    /// [`Tape::numerics_warnings`].
    pub fn ordinal_nll(&mut self, s: Var, alpha: Var, labels: &[usize]) -> Result<Var> {
        let (ts, ta) = (self.value(s), self.value(alpha));
        let b = ts.rows();
        let km1 = ta.cols();
        if ts.cols() != 1 || ta.rows() != 1 || labels.len() != b {
            return Err(shape_err("ordinal_nll", ts, ta));
        }
        let th = ta.data();
        if th.windows(2).any(|w| w[0] > w[1]) {
            return Err(TensorError::Contract("thresholds are not non-decreasing".into()));
        }
        let mut out = Vec::with_capacity(b);
        let mut dlo_dhi = Vec::with_capacity(b);
        let mut clamps = 0;
        for (i, &y) in labels.iter().enumerate() {
            if y > km1 {
                return Err(TensorError::Contract(format!("label {y} outside 0..={km1}")));
            }
            let si = ts.data()[i];
            let lo = if y == 0 { f64::NEG_INFINITY } else { th[y - 1] - si };
            let hi = if y == km1 { f64::INFINITY } else { th[y] - si };
            let p = gauss_interval(lo, hi);
            if p < PROB_FLOOR {
                clamps += 1;
                out.push(-PROB_FLOOR.ln());
                dlo_dhi.push((0.0, 0.0));
            } else {
                out.push(-p.ln());
                let plo = if lo.is_finite() { gauss_pdf(lo) } else { 0.0 };
                let phi = if hi.is_finite() { gauss_pdf(hi) } else { 0.0 };
                dlo_dhi.push((plo / p, -phi / p));
            }
        }
        self.numerics_warnings += clamps;
        let value = Tensor::column(&out);
        self.push(
            value,
            Op::OrdinalNll {
                s,
                alpha,
                labels: labels.to_vec(),
                dlo_dhi,
            },
            "ordinal_nll",
            &[s, alpha],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let g_row = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let g_row = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *d += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Binary { kind, a, b, ea, eb } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, cols) = (out.rows(), out.cols());
                for (operand, other, mode, other_mode, is_lhs) in
                    [(*a, tb, *ea, *eb, true), (*b, ta, *eb, *ea, false)]
                {
                    if !self.requires_grad(operand) {
                        continue;
                    }
                    let shape = self.value(operand).shape().to_vec();
                    let mut d = vec![0.0; shape.iter().product()];
                    for i in 0..rows {
                        for j in 0..cols {
                            let gv = g.data()[i * cols + j];
                            let local = match kind {
                                Binary::Add => gv,
                                Binary::Sub => {
                                    if is_lhs {
                                        gv
                                    } else {
                                        -gv
                                    }
                                }
                                Binary::Mul => gv * other.data()[expand_index(other_mode, i, j, cols)],
                            };
                            d[expand_index(mode, i, j, cols)] += local;
                        }
                    }
                    self.accumulate(grads, operand, Tensor::new(shape, d).unwrap());
                }
            }
            Op::Unary(kind, a) => {
                let ta = self.value(*a);
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &gv)| {
                        gv * match kind {
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::GaussCdf => gauss_pdf(x),
                            Unary::Log => 1.0 / x,
                            Unary::Neg => -1.0,
                            Unary::Softplus => sigmoid(x),
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::SumAll(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(ta.shape(), g.item()));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / m as f64
                } else {
                    1.0
                };
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|x| x * scale));
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), d).unwrap());
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let r = tp.rows();
                    if self.requires_grad(p) {
                        let d = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), d).unwrap());
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let (rows, cols, w) = (ta.rows(), ta.cols(), out.cols());
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    d[i * cols + start..i * cols + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for (k, &i) in index.iter().enumerate() {
                    for (o, &gv) in d[i * cols..(i + 1) * cols].iter_mut().zip(&g.data()[k * cols..(k + 1) * cols]) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
            }
            Op::ScatterAdd { x, src, dst } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (&s, &t) in src.iter().zip(dst) {
                    for (o, &gv) in d[s * cols..(s + 1) * cols].iter_mut().zip(&g.data()[t * cols..(t + 1) * cols]) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape).unwrap());
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Dropout(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, d) = (out.rows(), out.cols());
                let tg = self.value(*gamma);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut sum_dxhat = vec![0.0; d];
                let mut sum_dxhat_xhat = vec![0.0; d];
                for i in 0..b {
                    for j in 0..d {
                        let gv = g.data()[i * d + j];
                        let h = xhat[i * d + j];
                        dgamma[j] += gv * h;
                        dbeta[j] += gv;
                        let dh = gv * tg.data()[j];
                        sum_dxhat[j] += dh;
                        sum_dxhat_xhat[j] += dh * h;
                    }
                }
                if self.requires_grad(*x) {
                    let bf = b as f64;
                    let mut dx = vec![0.0; b * d];
                    for i in 0..b {
                        for j in 0..d {
                            let dh = g.data()[i * d + j] * tg.data()[j];
                            dx[i * d + j] =
                                inv_std[j] / bf * (bf * dh - sum_dxhat[j] - xhat[i * d + j] * sum_dxhat_xhat[j]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::matrix(b, d, dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::row(&dgamma));
                self.accumulate(grads, *beta, Tensor::row(&dbeta));
            }
            Op::OrdinalNll {
                s,
                alpha,
                labels,
                dlo_dhi,
            } => {
                let km1 = self.value(*alpha).cols();
                let mut ds = vec![0.0; labels.len()];
                let mut dalpha = vec![0.0; km1];
                for (i, (&y, &(dlo, dhi))) in labels.iter().zip(dlo_dhi).enumerate() {
                    let gv = g.data()[i];
                    // lo = α_{y−1} − s, hi = α_y − s
                    ds[i] = -gv * (dlo + dhi);
                    if y > 0 {
                        dalpha[y - 1] += gv * dlo;
                    }
                    if y < km1 {
                        dalpha[y] += gv * dhi;
                    }
                }
                self.accumulate(grads, *s, Tensor::column(&ds));
                self.accumulate(grads, *alpha, Tensor::row(&dalpha));
            }
        }
    }
}

#[inline]
fn expand_index(mode: Expand, i: usize, j: usize, cols: usize) -> usize {
    match mode {
        Expand::Full => i * cols + j,
        Expand::Row => j,
        Expand::Col => i,
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(&out)
}
