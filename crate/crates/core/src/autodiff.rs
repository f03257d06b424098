//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every primitive in execution order. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so building a graph per
//! utterance is cheap. [`Graph::backward`] walks the tape once in reverse and
//! returns per-parameter [`Gradients`].

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::losses::ctc;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, log_softmax_in_place, softmax_in_place, Matrix};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Sum(Var),
    PickSum { a: Var, picks: Vec<(usize, usize)> },
    Ctc { a: Var, occupancy: Matrix },
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
}

/// The recorded computation for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.value(id)),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        check(k == k2, "matmul", || format!("{m}x{k} * {k2}x{n}"))?;
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }))
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        check(k == k2, "matmul_t", || format!("{m}x{k} * ({n}x{k2})ᵀ"))?;
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            out.data_mut(),
        );
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, "add", || format!("{sa:?} + {sb:?}"))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), sr) = (self.shape(a), self.shape(row));
        check(sr == (1, n), "add_row", || format!("{m}x{n} + row {sr:?}"))?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for i in 0..m {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, "mul", || format!("{sa:?} * {sb:?}"))?;
        let mut out = self.value(a).clone();
        for (o, b) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= b;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a constant matrix (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let sa = self.shape(a);
        check(sa == c.shape(), "add_const", || format!("{sa:?} + {:?}", c.shape()))?;
        let mut out = self.value(a).clone();
        out.add_assign(c);
        Ok(self.push(out, Op::AddConst(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.shape(x);
        check(
            self.shape(gamma) == (1, n) && self.shape(beta) == (1, n),
            "layer_norm",
            || format!("x {m}x{n}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
        )?;
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Matrix::zeros(m, n);
        let mut out = Matrix::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd.push(s);
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat[(r, c)] = h;
                out[(r, c)] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} out of range for table {rows}x{cols}"),
            ));
        }
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        check(
            parts.iter().all(|&p| self.shape(p).0 == rows),
            "concat",
            || format!("row counts {:?}", parts.iter().map(|&p| self.shape(p)).collect::<Vec<_>>()),
        )?;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        check(
            parts.iter().all(|&p| self.shape(p).1 == cols),
            "concat",
            || format!("column counts {:?}", parts.iter().map(|&p| self.shape(p)).collect::<Vec<_>>()),
        )?;
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let rows = if cols == 0 { parts.iter().map(|&p| self.shape(p).0).sum() } else { rows };
        Ok(self.push(Matrix::from_vec(rows, cols, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        check(start + len <= n, "slice_cols", || format!("{start}+{len} > {n}"))?;
        let av = self.value(a);
        let mut out = Matrix::zeros(m, len);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        check(start + len <= m, "slice_rows", || format!("{start}+{len} > {m}"))?;
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Matrix::from_vec(len, n, data)?, Op::SliceRows { a, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Sum of the selected `(row, col)` entries, as a `1 x 1` value.
    pub fn pick_sum(&mut self, a: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(bad) = picks.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::shape("pick_sum", format!("index {bad:?} outside {m}x{n}")));
        }
        let av = self.value(a);
        let s = picks.iter().map(|&(r, c)| av[(r, c)]).sum();
        Ok(self.push(
            Matrix::scalar(s),
            Op::PickSum {
                a,
                picks: picks.to_vec(),
            },
        ))
    }

    /// CTC log-likelihood of `targets` under frame log-probabilities `a`.
    ///
    /// When no alignment exists the value is `-inf` and no gradient flows.
    pub fn ctc_log_likelihood(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let fb = ctc::forward_backward(self.value(a), targets)?;
        Ok(self.push(
            Matrix::scalar(fb.log_likelihood),
            Op::Ctc {
                a,
                occupancy: fb.occupancy,
            },
        ))
    }

    // Composite primitives.

    /// `x * W + b` with `W` stored `in x out` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let y = self.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    /// `softmax(q kᵀ / sqrt(d) + mask)` returning the attention weights.
    pub fn scaled_dot(&mut self, q: Var, k: Var, mask: Option<&Matrix>) -> Result<Var> {
        let d = self.shape(q).1;
        let scores = self.matmul_t(q, k)?;
        let mut scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(mask) = mask {
            scaled = self.add_const(scaled, mask)?;
        }
        Ok(self.softmax_rows(scaled))
    }

    /// One LSTM step with gates ordered input, forget, cell, output.
    ///
    /// `w_x` is `in x 4h`, `w_h` is `h x 4h`, `b` is `1 x 4h`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_x: ParamId,
        w_h: ParamId,
        b: ParamId,
    ) -> Result<(Var, Var)> {
        let hidden = self.shape(h).1;
        let gx = self.linear(x, w_x, Some(b))?;
        let wh = self.param(w_h);
        let gh = self.matmul(h, wh)?;
        let gates = self.add(gx, gh)?;
        let i_pre = self.slice_cols(gates, 0, hidden)?;
        let f_pre = self.slice_cols(gates, hidden, hidden)?;
        let g_pre = self.slice_cols(gates, 2 * hidden, hidden)?;
        let o_pre = self.slice_cols(gates, 3 * hidden, hidden)?;
        let i = self.sigmoid(i_pre);
        let f = self.sigmoid(f_pre);
        let g = self.tanh(g_pre);
        let o = self.sigmoid(o_pre);
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_new = self.add(fc, ig)?;
        let tc = self.tanh(c_new);
        let h_new = self.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Reverse traversal from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::new(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &*node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, n) = g.shape();
                    let k = av.cols();
                    let mut ga = Matrix::zeros(m, k);
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        // y = a bᵀ, b is n x k
                        gemm(m, n, k, 1.0, g.data(), false, bv.data(), false, 0.0, ga.data_mut());
                        gemm(n, m, k, 1.0, g.data(), true, av.data(), false, 0.0, gb.data_mut());
                    } else {
                        gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, ga.data_mut());
                        gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, gb.data_mut());
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (x, v) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= v;
                    }
                    let mut gb = g;
                    for (x, v) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= v;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    let mut ga = g;
                    ga.data_mut().iter_mut().for_each(|v| *v *= f);
                    acc(&mut grads, *a, ga);
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(y.data()) {
                        if *v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (x, s) in ga.data_mut().iter_mut().zip(y.data()) {
                        *x *= s * (1.0 - s);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (x, t) in ga.data_mut().iter_mut().zip(y.data()) {
                        *x *= 1.0 - t * t;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let yr = y.row(r);
                        let dot: f64 = ga.row(r).iter().zip(yr).map(|(d, p)| d * p).sum();
                        for (d, p) in ga.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let total: f64 = ga.row(r).iter().sum();
                        for (d, lp) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d -= lp.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = g.shape();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = Matrix::zeros(1, n);
                    let mut dbeta = Matrix::zeros(1, n);
                    let mut dx = Matrix::zeros(m, n);
                    for r in 0..m {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..n {
                            dgamma.data_mut()[c] += gr[c] * hr[c];
                            dbeta.data_mut()[c] += gr[c];
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            dx[(r, c)] = rstd[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::Gather { table, ids } => {
                    let (rows, cols) = self.shape(*table);
                    let mut gt = Matrix::zeros(rows, cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (s, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        let mut gp = Matrix::zeros(m, n);
                        for r in 0..m {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + n]);
                        }
                        off += n;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = self.shape(p);
                        let gp = Matrix::from_vec(m, n, g.data()[off * n..(off + m) * n].to_vec())?;
                        off += m;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols { a, start } => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Matrix::zeros(m, n);
                    for r in 0..m {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows { a, start } => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Matrix::zeros(m, n);
                    ga.data_mut()[start * n..(start + g.rows()) * n].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (m, n) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(m, n, g.item()));
                }
                Op::PickSum { a, picks } => {
                    let (m, n) = self.shape(*a);
                    let mut ga = Matrix::zeros(m, n);
                    for &(r, c) in picks {
                        ga[(r, c)] += g.item();
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Ctc { a, occupancy } => {
                    let mut ga = occupancy.clone();
                    let s = g.item();
                    ga.data_mut().iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Compares analytic gradients of `loss_fn` against central finite differences.
///
/// Returns the maximum over parameters of
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)`,
/// where the maxima run over the entries of each parameter.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, 1e-3]"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let first = g.value(loss).item();
        let second = eval(store)?;
        if first.to_bits() != second.to_bits() {
            return Err(Error::Contract(format!(
                "loss closure is not deterministic: {first} vs {second}"
            )));
        }
        g.backward(loss)?
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.value(id).len();
        let mut max_diff: f64 = 0.0;
        let mut max_a: f64 = 0.0;
        let mut max_n: f64 = 0.0;
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + epsilon;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - epsilon;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            max_diff = max_diff.max((a - numeric).abs());
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        let rel = max_diff / max_a.max(max_n).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
