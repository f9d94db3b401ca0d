//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every parameter that was read through [`Tape::param`].

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumSquares(Var),
    BceWithLogits {
        logits: Var,
        /// `d loss / d logit` per entry, zero where the probability was clamped.
        dlogits: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one entry with the probability clamped to `[eps, 1 - eps]`.
/// Returns `(loss, d loss / d logit)`.
#[inline]
pub fn bce_entry(logit: f64, target: f64, eps: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let clamped = p.clamp(eps, 1.0 - eps);
    let loss = -target * clamped.ln() - (1.0 - target) * (1.0 - clamped).ln();
    let grad = if p < eps || p > 1.0 - eps {
        0.0
    } else {
        p - target
    };
    (loss, grad)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Reads a parameter; repeated reads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.scaled_add_assign(-1.0, self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    /// Adds the `(1, cols)` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` of shape `(1, cols)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let nv = (row[c] - mean) * is;
                normed.set(r, c, nv);
                out.set(r, c, nv * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    /// Multiplies elementwise by a fixed mask (already scaled by `1/keep`).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.data().len(), "dropout mask size");
        let data = av.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(value, Op::Dropout(a, mask))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        self.push(value, Op::GatherRows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in &parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>, cols: usize) -> Var {
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Matrix::scalar(s), Op::SumSquares(a))
    }

    /// Summed sigmoid binary cross-entropy over the entries where `mask` is
    /// non-zero (all entries when `mask` is `None`), probabilities clamped to
    /// `[eps, 1 - eps]`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &Matrix,
        mask: Option<&Matrix>,
        eps: f64,
    ) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce target shape");
        if let Some(m) = mask {
            assert_eq!(m.shape(), targets.shape(), "bce mask shape");
        }
        let (rows, cols) = z.shape();
        let mut dlogits = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for i in 0..rows * cols {
            let w = mask.map_or(1.0, |m| m.data()[i]);
            if w == 0.0 {
                continue;
            }
            let (l, g) = bce_entry(z.data()[i], targets.data()[i], eps);
            total += w * l;
            dlogits.data_mut()[i] = w * g;
        }
        self.push(Matrix::scalar(total), Op::BceWithLogits { logits, dlogits })
    }

    /// Gradients of the scalar `root` with respect to every parameter read on
    /// this tape, indexed like `store`. Parameters not on the tape get zeros.
    pub fn backward(&self, root: Var, store: &ParamStore) -> Vec<Matrix> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut out = store.zeros_like();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let da = g.matmul_bt(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let db = self.value(*a).matmul_at(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.needs_grad(*a) {
                        let da = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let db = g.matmul_at(self.value(*a));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, g.col_sums());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let mut da = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let sr = s.row(r);
                        let gr = g.row(r);
                        let inner = dot(sr, gr);
                        for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                            *o = sr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let (rows, cols) = normed.shape();
                    let gv = self.value(*gamma).data();
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dn = 0.0;
                        let mut dn = vec![0.0; cols];
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * nr[c];
                            dbeta.data_mut()[c] += gr[c];
                            dn[c] = gr[c] * gv[c];
                            sum_d += dn[c];
                            sum_dn += dn[c] * nr[c];
                        }
                        let is = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is / n * (n * dn[c] - sum_d - nr[c] * sum_dn);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(v, m)| v * m).collect();
                    accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::GatherRows(a, idx) => {
                    if self.needs_grad(*a) {
                        let av = self.value(*a);
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        for (r, &src) in idx.iter().enumerate() {
                            for (o, v) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let (h, w) = self.value(p).shape();
                        let dp = Matrix::from_vec(
                            h,
                            w,
                            g.data()[row * w..(row + h) * w].to_vec(),
                        );
                        row += h;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.item();
                    accumulate(&mut grads, *a, self.value(*a).map(|v| s * v));
                }
                Op::BceWithLogits { logits, dlogits } => {
                    let s = g.item();
                    accumulate(&mut grads, *logits, dlogits.map(|v| s * v));
                }
            }
        }
        out
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    /// Central-difference check of one small graph builder.
    fn check(build: impl Fn(&mut Tape, &ParamStore) -> Var, store: &ParamStore) {
        let mut tape = Tape::new();
        let root = build(&mut tape, store);
        let grads = tape.backward(root, store);
        let h = 1e-5;
        for id in store.ids() {
            for j in 0..store.get(id).data().len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[j] -= h;
                let fp = {
                    let mut t = Tape::new();
                    let r = build(&mut t, &plus);
                    t.value(r).item()
                };
                let fm = {
                    let mut t = Tape::new();
                    let r = build(&mut t, &minus);
                    t.value(r).item()
                };
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads[id.0].data()[j];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-6,
                    "{} [{j}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn store_with(entries: &[(&str, Matrix)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, m) in entries {
            s.insert(*n, m.clone());
        }
        s
    }

    #[test]
    fn grad_matmul_softmax_layer_norm() {
        let store = store_with(&[
            (
                "x",
                Matrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![1.1, 0.2, -0.7]]),
            ),
            (
                "w",
                Matrix::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.3, 0.6]]),
            ),
            ("g", Matrix::from_rows(&[vec![1.2, 0.8, -0.5]])),
            ("b", Matrix::from_rows(&[vec![0.1, -0.2, 0.3]])),
        ]);
        let ids: Vec<_> = ["x", "w", "g", "b"]
            .iter()
            .map(|n| store.id(n).unwrap())
            .collect();
        check(
            |t, s| {
                let x = t.param(s, ids[0]);
                let w = t.param(s, ids[1]);
                let g = t.param(s, ids[2]);
                let b = t.param(s, ids[3]);
                let ln = t.layer_norm(x, g, b);
                let h = t.matmul(ln, w);
                let p = t.softmax(h);
                let att = t.matmul_bt(p, h);
                let sl = t.slice_cols(att, 1, 1);
                let cat = t.concat_cols(vec![sl, p]);
                t.sum_squares(cat)
            },
            &store,
        );
    }

    #[test]
    fn grad_bce_gather_concat_rows() {
        let store = store_with(&[
            (
                "emb",
                Matrix::from_rows(&[vec![0.3, -1.2], vec![1.1, 0.2], vec![-0.4, 0.9]]),
            ),
            ("bias", Matrix::from_rows(&[vec![0.05, -0.1]])),
        ]);
        let targets = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let e = store.id("emb").unwrap();
        let b = store.id("bias").unwrap();
        check(
            |t, s| {
                let emb = t.param(s, e);
                let bias = t.param(s, b);
                let g1 = t.gather_rows(emb, vec![2, 0]);
                let g2 = t.gather_rows(emb, vec![2]);
                let rows = t.concat_rows(vec![g1, g2], 2);
                let z = t.add_row(rows, bias);
                let z = t.relu(z);
                let z = t.scale(z, 1.7);
                let d = t.dropout_with_mask(z, vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0]);
                t.bce_with_logits(d, &targets, None, 1e-7)
            },
            &store,
        );
    }

    #[test]
    fn bce_zero_logits_is_ln2_per_entry() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(2, 3));
        let y = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]);
        let l = t.bce_with_logits(z, &y, None, 1e-7);
        assert!((t.value(l).item() - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[vec![1000.0, 1.0, -3.0], vec![0.0, 0.0, 0.0]]));
        let s = t.softmax(a);
        for r in 0..2 {
            assert!((t.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
