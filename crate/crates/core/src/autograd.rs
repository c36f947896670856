//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Learnable tensors
//! live in a [`ParamStore`]; parameter leaves read from the store without
//! copying and [`Tape::backward`] returns one gradient per parameter.

use std::rc::Rc;

use rand::Rng;

use crate::tensor::{dot, Matrix};

/// Named learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    RelLogits {
        q: Var,
        r: Var,
        max_rel: usize,
    },
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    BceWithLogits {
        logits: Var,
        targets: Rc<Matrix>,
        active: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Boolean attention mask: `true` marks an allowed (query, key) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Every query may see every key whose `key_valid` flag is set.
    pub fn keys(rows: usize, key_valid: &[bool]) -> Self {
        Self::from_fn(rows, key_valid.len(), |_, j| key_valid[j])
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        AttnMask { rows, cols, allowed }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Row index into a relative-position table of `2 * max_rel - 1` rows for
/// key offset `j - i`, clipped to `±(max_rel - 1)`.
#[inline]
pub fn relative_index(i: usize, j: usize, max_rel: usize) -> usize {
    let m = max_rel as isize - 1;
    let d = (j as isize - i as isize).clamp(-m, m);
    (d + m) as usize
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Matrix::zeros(0, 0), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a single-row bias");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(bias.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row lookup: output row `k` is `table[indices[k]]`.
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(indices.len(), t.cols());
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).copy_from_slice(t.row(i));
        }
        self.push(v, Op::Gather(table, indices))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), width);
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let m = self.value(a);
        let cols = m.cols();
        let v = Matrix::from_vec(count, cols, m.data()[start * cols..(start + count) * cols].to_vec());
        self.push(v, Op::SliceRows(a, start))
    }

    /// Row-wise softmax; disallowed entries get probability exactly 0 and a
    /// row with no allowed entry is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&AttnMask>) -> Var {
        let x = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.shape(), x.shape(), "softmax mask shape mismatch");
        }
        let mut v = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let ok = |c: usize| mask.is_none_or(|m| m.allowed(r, c));
            let row = x.row(r);
            let max = (0..row.len())
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = v.row_mut(r);
            let mut sum = 0.0;
            for c in 0..row.len() {
                if ok(c) {
                    out[c] = (row[c] - max).exp();
                    sum += out[c];
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    /// Row-wise layer normalization with learnable `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xm = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xm.cols();
        let mut xhat = Matrix::zeros(xm.rows(), n);
        let mut out = Matrix::zeros(xm.rows(), n);
        let mut inv_std = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// `S[i, j] = q_i . r[relative_index(i, j)]` for a square query/key grid.
    pub fn rel_logits(&mut self, q: Var, r: Var, max_rel: usize) -> Var {
        let (qm, rm) = (self.value(q), self.value(r));
        assert_eq!(rm.rows(), 2 * max_rel - 1, "relative table has wrong row count");
        assert_eq!(qm.cols(), rm.cols(), "relative table width mismatch");
        let n = qm.rows();
        let mut v = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                v.set(i, j, dot(qm.row(i), rm.row(relative_index(i, j, max_rel))));
            }
        }
        self.push(v, Op::RelLogits { q, r, max_rel })
    }

    /// Inverted dropout; `rate == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut v = self.value(a).clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push(v, Op::Dropout(a, mask))
    }

    /// Weighted mean of per-row `-log softmax(logits)[target]`. Weights must
    /// not all be zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(targets.len(), z.rows());
        assert_eq!(weights.len(), z.rows());
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "cross_entropy with zero total weight");
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            for (c, &v) in row.iter().enumerate() {
                probs.set(r, c, (v - log_norm).exp());
            }
            loss += weights[r] * (log_norm - row[targets[r]]);
        }
        self.push(
            Matrix::scalar(loss / total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    /// Mean over active rows of the per-element binary cross-entropy between
    /// `sigmoid(logits)` and multi-hot `targets`, averaged across columns.
    /// With no active row the result is the constant 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Matrix>, active: Vec<bool>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape());
        assert_eq!(active.len(), z.rows());
        let n_active = active.iter().filter(|&&a| a).count();
        let mut loss = 0.0;
        if n_active > 0 {
            for r in (0..z.rows()).filter(|&r| active[r]) {
                for (&x, &y) in z.row(r).iter().zip(targets.row(r)) {
                    loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                }
            }
            loss /= (n_active * z.cols()) as f64;
        }
        self.push(
            Matrix::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets,
                active,
            },
        )
    }

    /// Back-propagates from the scalar `root` and returns one gradient per
    /// parameter in the store (zeros for parameters the graph never touched).
    pub fn backward(&self, root: Var) -> Vec<Matrix> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut param_grads: Vec<Matrix> = self
            .params
            .values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => param_grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(self.value(*b)));
                    acc(*b, g.t_matmul(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, db);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::OneMinus(a) => acc(*a, g.map(|x| -x)),
                Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Gather(table, indices) => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows(), t.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (x, y) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *x += y;
                        }
                    }
                    acc(*table, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(p, d);
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let cols = g.cols();
                        let d = Matrix::from_vec(h, cols, g.data()[offset * cols..(offset + h) * cols].to_vec());
                        offset += h;
                        acc(p, d);
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    d.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    acc(*a, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = dot(g.row(r), y.row(r));
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - s));
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let n = xhat.cols();
                    let mut dgamma = Matrix::zeros(1, n);
                    let mut dbeta = Matrix::zeros(1, n);
                    let mut dx = Matrix::zeros(xhat.rows(), n);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            dgamma.data_mut()[c] += gr[c] * hr[c];
                            dbeta.data_mut()[c] += gr[c];
                            let dh = gr[c] * gm.data()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let scale = is / n as f64;
                        for c in 0..n {
                            let dh = gr[c] * gm.data()[c];
                            dx.set(r, c, scale * (n as f64 * dh - sum_dh - hr[c] * sum_dh_h));
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::RelLogits { q, r, max_rel } => {
                    let (qm, rm) = (self.value(*q), self.value(*r));
                    let mut dq = Matrix::zeros(qm.rows(), qm.cols());
                    let mut dr = Matrix::zeros(rm.rows(), rm.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            let k = relative_index(i, j, *max_rel);
                            for c in 0..qm.cols() {
                                dq.data_mut()[i * qm.cols() + c] += gij * rm.get(k, c);
                                dr.data_mut()[k * rm.cols() + c] += gij * qm.get(i, c);
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*r, dr);
                }
                Op::Dropout(a, mask) => {
                    let mut d = g;
                    for (x, m) in d.data_mut().iter_mut().zip(mask) {
                        *x *= m;
                    }
                    acc(*a, d);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let total: f64 = weights.iter().sum();
                    let s = g.item() / total;
                    let mut d = probs.clone();
                    for r in 0..d.rows() {
                        let w = weights[r] * s;
                        let row = d.row_mut(r);
                        row[targets[r]] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= w;
                        }
                    }
                    acc(*logits, d);
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    active,
                } => {
                    let z = self.value(*logits);
                    let n_active = active.iter().filter(|&&a| a).count();
                    let mut d = Matrix::zeros(z.rows(), z.cols());
                    if n_active > 0 {
                        let s = g.item() / (n_active * z.cols()) as f64;
                        for r in (0..z.rows()).filter(|&r| active[r]) {
                            for c in 0..z.cols() {
                                d.set(r, c, s * (sigmoid(z.get(r, c)) - targets.get(r, c)));
                            }
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
        param_grads
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every parameter entry for a scalar function.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let analytic = {
            let mut tape = Tape::new(store);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let h = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let plus = {
                    let mut t = Tape::new(store);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                store.get_mut(id).data_mut()[k] = orig - h;
                let minus = {
                    let mut t = Tape::new(store);
                    let r = f(&mut t);
                    t.value(r).item()
                };
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[id.index()].data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{k}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.add(n, Matrix::randn(r, c, 0.7, &mut rng));
        }
        s
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut s = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("bias", 1, 2)]);
        check(&mut s, |t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let c = t.param(ParamId(2));
            let bias = t.param(ParamId(3));
            let ab = t.matmul(a, b);
            let ab = t.add_row(ab, bias);
            let th = t.tanh(ab);
            let sg = t.sigmoid(c);
            let om = t.one_minus(sg);
            let m = t.mul(th, om);
            let r = t.relu(c);
            let m = t.add(m, r);
            let ct = t.matmul_t(m, c);
            let ct = t.scale(ct, 0.3);
            t.cross_entropy(ct, vec![0, 2, 1], vec![1.0, 0.0, 2.0])
        });
    }

    #[test]
    fn structural_grads() {
        let mut s = store_with(&[("x", 4, 3), ("y", 2, 3), ("table", 5, 2)]);
        check(&mut s, |t| {
            let x = t.param(ParamId(0));
            let y = t.param(ParamId(1));
            let table = t.param(ParamId(2));
            let rows = t.concat_rows(&[x, y]);
            let part = t.slice_rows(rows, 1, 4);
            let g = t.gather(table, vec![0, 3, 3, 1]);
            let cat = t.concat_cols(&[part, g]);
            let sl = t.slice_cols(cat, 1, 3);
            let targets = Rc::new(Matrix::from_rows(&[
                vec![1.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 1.0, 0.0],
                vec![0.0, 1.0, 0.0],
            ]));
            t.bce_with_logits(sl, targets, vec![true, false, true, true])
        });
    }

    #[test]
    fn attention_pieces_grads() {
        let mut s = store_with(&[("q", 4, 3), ("k", 4, 3), ("r", 5, 3), ("g", 1, 4), ("b", 1, 4)]);
        let mask = AttnMask::causal(4);
        check(&mut s, |t| {
            let q = t.param(ParamId(0));
            let k = t.param(ParamId(1));
            let r = t.param(ParamId(2));
            let scores = t.matmul_t(q, k);
            let rel = t.rel_logits(q, r, 3);
            let sum = t.add(scores, rel);
            let p = t.softmax(sum, Some(&mask));
            let gamma = t.param(ParamId(3));
            let beta = t.param(ParamId(4));
            let ln = t.layer_norm(p, gamma, beta);
            t.cross_entropy(ln, vec![3, 0, 1, 2], vec![1.0; 4])
        });
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, 0.5, 9.0]]));
        let mask = AttnMask::from_fn(2, 3, |i, j| j <= i);
        let p = t.softmax(x, Some(&mask));
        let p = t.value(p);
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert!((p.get(1, 0) - 0.5).abs() < 1e-15);
        assert_eq!(p.get(1, 2), 0.0);
    }

    #[test]
    fn relative_index_clips() {
        assert_eq!(relative_index(5, 5, 3), 2);
        assert_eq!(relative_index(5, 0, 3), 0);
        assert_eq!(relative_index(0, 5, 3), 4);
        assert_eq!(relative_index(2, 1, 3), 1);
    }
}
