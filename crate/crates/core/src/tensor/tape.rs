use std::collections::HashMap;
use std::ops::Deref;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernel::gemm;
use super::{ParamId, ParameterStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation with a hand-written backward pass, for kernels that are
/// awkward to express with the primitive ops (e.g. CRF likelihoods).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contributions for each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    MaxRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Dropout(Var, Tensor),
    RowNorm(Var, Vec<f64>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters are borrowed from a [`ParameterStore`] without copying; each
/// parameter appears at most once on the tape so all of its uses accumulate
/// into one gradient.
pub struct Tape<'p> {
    store: Option<&'p ParameterStore>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            dropout_rng: None,
        }
    }

    pub fn with_params(store: &'p ParameterStore) -> Self {
        Tape {
            store: Some(store),
            ..Tape::new()
        }
    }

    /// Enables training mode: dropout masks are drawn from a seeded RNG.
    pub fn train(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; the name documents intent at call sites.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims();
        let (k2, n) = tb.dims();
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), m, k, false, tb.data(), n, false, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = ta.dims();
        Ok(Tensor::matrix(r, c, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, m) = ta.dims();
        if tr.dims() != (1, m) {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut out = ta.data().to_vec();
        for r in 0..n {
            for (o, b) in out[r * m..(r + 1) * m].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddRow(a, row)))
    }

    /// `a + col`, broadcasting an `n x 1` column over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (n, m) = ta.dims();
        if tc.dims() != (n, 1) {
            return Err(mismatch("add_col", ta, tc));
        }
        let mut out = ta.data().to_vec();
        for r in 0..n {
            let b = tc.data()[r];
            for o in out[r * m..(r + 1) * m].iter_mut() {
                *o += b;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddCol(a, col)))
    }

    /// `a * row` elementwise, broadcasting a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, m) = ta.dims();
        if tr.dims() != (1, m) {
            return Err(mismatch("mul_row", ta, tr));
        }
        let mut out = ta.data().to_vec();
        for r in 0..n {
            for (o, b) in out[r * m..(r + 1) * m].iter_mut().zip(tr.data()) {
                *o *= b;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::Shift(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::Softmax(a))
    }

    /// Sum over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = tl.dims();
        if targets.len() != n || targets.iter().any(|&t| t >= v) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("{} targets for logits of shape {:?}", targets.len(), tl.shape()),
            });
        }
        let probs = softmax_rows(tl);
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -log_softmax_at(tl.row_slice(r), t))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols.max(1);
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = t.dims();
        if start + len > m {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                message: format!("columns {start}..{} out of {m}", start + len),
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(n, len, out), Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = t.dims();
        if start + len > n {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                message: format!("rows {start}..{} out of {n}", start + len),
            });
        }
        let out = t.data()[start * m..(start + len) * m].to_vec();
        Ok(self.push(Tensor::matrix(len, m, out), Op::SliceRows(a, start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    /// Mean over rows: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims();
        let mut out = vec![0.0; m];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::row(out), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Column-wise max over rows (max-pooling): `n x m -> 1 x m`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = t.dims();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "max_rows",
                message: "no rows".into(),
            });
        }
        let mut arg = vec![0usize; m];
        let mut out = t.row_slice(0).to_vec();
        for r in 1..n {
            for (c, &x) in t.row_slice(r).iter().enumerate() {
                if x > out[c] {
                    out[c] = x;
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(Tensor::row(out), Op::MaxRows(a, arg)))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, m) = t.dims();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather",
                message: format!("row {bad} out of {n}"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            out.extend_from_slice(t.row_slice(i));
        }
        Ok(self.push(Tensor::matrix(ids.len(), m, out), Op::Gather(table, ids.to_vec())))
    }

    /// Inverted dropout. Identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let t = &self.nodes[a.0].value;
        let (n, m) = t.dims();
        let mask: Vec<f64> = (0..n * m)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
        self.push(Tensor::matrix(n, m, out), Op::Dropout(a, Tensor::matrix(n, m, mask)))
    }

    /// Normalises each row to zero mean and unit variance.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims();
        let mut out = Vec::with_capacity(n * m);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        self.push(Tensor::matrix(n, m, out), Op::RowNorm(a, inv_std))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(out).map(|_| 1.0);
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_vars.iter().map(|(&p, &v)| (p, v)).collect(),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y: &Tensor = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims();
                let n = tb.cols();
                gemm(g.data(), m, n, false, tb.data(), k, true, self.slot(grads, *a).data_mut(), 1.0);
                gemm(ta.data(), k, m, true, g.data(), n, false, self.slot(grads, *b).data_mut(), 1.0);
            }
            Op::Add(a, b) => {
                self.slot(grads, *a).add_assign(g);
                self.slot(grads, *b).add_assign(g);
            }
            Op::Sub(a, b) => {
                self.slot(grads, *a).add_assign(g);
                let gb = self.slot(grads, *b);
                for (x, d) in gb.data_mut().iter_mut().zip(g.data()) {
                    *x -= d;
                }
            }
            Op::AddRow(a, row) => {
                self.slot(grads, *a).add_assign(g);
                let (n, m) = g.dims();
                let gr = self.slot(grads, *row);
                for r in 0..n {
                    for (x, d) in gr.data_mut().iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                        *x += d;
                    }
                }
            }
            Op::AddCol(a, col) => {
                self.slot(grads, *a).add_assign(g);
                let (n, _) = g.dims();
                let gc = self.slot(grads, *col);
                for r in 0..n {
                    gc.data_mut()[r] += g.row_slice(r).iter().sum::<f64>();
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = self.slot(grads, *a);
                for ((x, d), o) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                    *x += d * o;
                }
                let gb = self.slot(grads, *b);
                for ((x, d), o) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    *x += d * o;
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let (n, m) = g.dims();
                let ga = self.slot(grads, *a);
                for r in 0..n {
                    for c in 0..m {
                        ga.data_mut()[r * m + c] += g.data()[r * m + c] * tr.data()[c];
                    }
                }
                let gr = self.slot(grads, *row);
                for r in 0..n {
                    for c in 0..m {
                        gr.data_mut()[c] += g.data()[r * m + c] * ta.data()[r * m + c];
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = self.slot(grads, *a);
                for (x, d) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += s * d;
                }
            }
            Op::Shift(a) => self.slot(grads, *a).add_assign(g),
            Op::Sigmoid(a) => {
                let ga = self.slot(grads, *a);
                for ((x, d), s) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *x += d * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                let ga = self.slot(grads, *a);
                for ((x, d), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *x += d * (1.0 - t * t);
                }
            }
            Op::Relu(a) => {
                let ga = self.slot(grads, *a);
                for ((x, d), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    if *t > 0.0 {
                        *x += d;
                    }
                }
            }
            Op::Softmax(a) => {
                let (n, m) = y.dims();
                let ga = self.slot(grads, *a);
                for r in 0..n {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..m {
                        ga.data_mut()[r * m + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item();
                let m = probs.cols();
                let gl = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..m {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gl.data_mut()[r * m + c] += scale * (probs.data()[r * m + c] - onehot);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = self.slot(grads, *p);
                    for r in 0..n {
                        for c in 0..w {
                            gp.data_mut()[r * w + c] += g.data()[r * total + off + c];
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let gp = self.slot(grads, *p);
                    for (x, d) in gp.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                        *x += d;
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, w) = g.dims();
                let m = self.value(*a).cols();
                let ga = self.slot(grads, *a);
                for r in 0..n {
                    for c in 0..w {
                        ga.data_mut()[r * m + start + c] += g.data()[r * w + c];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let m = g.cols();
                let ga = self.slot(grads, *a);
                for (x, d) in ga.data_mut()[start * m..].iter_mut().zip(g.data()) {
                    *x += d;
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.slot(grads, *a).add_assign(&gt);
            }
            Op::MeanRows(a) => {
                let (n, m) = self.value(*a).dims();
                let inv = 1.0 / n.max(1) as f64;
                let ga = self.slot(grads, *a);
                for r in 0..n {
                    for c in 0..m {
                        ga.data_mut()[r * m + c] += g.data()[c] * inv;
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g.item();
                for x in self.slot(grads, *a).data_mut() {
                    *x += s;
                }
            }
            Op::MaxRows(a, arg) => {
                let m = g.cols();
                let ga = self.slot(grads, *a);
                for (c, &r) in arg.iter().enumerate() {
                    ga.data_mut()[r * m + c] += g.data()[c];
                }
            }
            Op::Gather(table, ids) => {
                let m = g.cols();
                let gt = self.slot(grads, *table);
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..m {
                        gt.data_mut()[i * m + c] += g.data()[r * m + c];
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = self.slot(grads, *a);
                for ((x, d), k) in ga.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                    *x += d * k;
                }
            }
            Op::RowNorm(a, inv_std) => {
                let (n, m) = y.dims();
                let ga = self.slot(grads, *a);
                for r in 0..n {
                    let yr = &y.data()[r * m..(r + 1) * m];
                    let gr = &g.data()[r * m..(r + 1) * m];
                    let mean_g = gr.iter().sum::<f64>() / m as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / m as f64;
                    for c in 0..m {
                        ga.data_mut()[r * m + c] += inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = op.backward(&vals, y, g);
                for (v, c) in inputs.iter().zip(contribs) {
                    self.slot(grads, *v).add_assign(&c);
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        grads[v.0].get_or_insert_with(|| {
            let t = self.value(v);
            Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape")
        })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that was read on the tape.
    pub fn param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|&(p, v)| self.grads[v.0].take().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let (n, m) = t.dims();
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        let row = t.row_slice(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::matrix(n, m, out)
}

pub(crate) fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
    row[t] - mx - z.ln()
}
