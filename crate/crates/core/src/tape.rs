//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and returns one gradient per node. Scalars are 1×1
//! matrices. The fused operations (attention, layer norm, InfoNCE, softmax
//! cross-entropy, KL) carry hand-written adjoints.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};
use rayon::prelude::*;

use crate::sparse::Csr;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq_len: usize,
    heads: usize,
    /// Softmax probabilities per (batch, head): seq_len × seq_len, row-major.
    probs: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers aligned with `probs` (None = no dropout).
    keep: Option<Vec<Vec<f64>>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Mat>),
    Affine(Var, f64),
    Gather(Var, Vec<usize>),
    SpMM(Arc<Csr>, Var),
    Gelu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    RowNormalize { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Column(Var, usize),
    Sum(Var),
    Mean(Var),
    Extreme { x: Var, at: (usize, usize) },
    SubScalar(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    InfoNce { anchors: Var, candidates: Var, weights: Var, positives: Vec<usize>, tau: f64, probs: Mat, terms: Vec<f64> },
    SoftmaxXent { scores: Var, targets: Vec<usize>, probs: Mat },
    Kl { omega: Var, phi: Vec<f64>, eps: f64 },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn scalar(v: f64) -> Mat {
    Array2::from_elem((1, 1), v)
}

/// Numerically stable log-sum-exp of one row.
fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.leaf(scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a 1×m row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let value = self.value(a) * c.as_ref();
        self.push(value, Op::MulConst(a, c))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        self.push(value, Op::Gather(a, rows))
    }

    pub fn spmm(&mut self, m: Arc<Csr>, a: Var) -> Var {
        let value = m.spmm(self.value(a).view());
        self.push(value, Op::SpMM(m, a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Row-wise layer normalization with learned 1×m gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq_len` rows each. `q`, `k`, `v` are (batch·seq_len)×d with heads
    /// occupying consecutive column blocks. Keys at positions ≥ `lengths[b]`
    /// are masked out. `keep` holds per-(batch, head) inverted-dropout
    /// multipliers for the attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        heads: usize,
        lengths: Vec<usize>,
        keep: Option<Vec<Vec<f64>>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "embedding dim must divide into heads");
        assert_eq!(qv.nrows(), batch * seq_len);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let results: Vec<(Vec<f64>, Mat)> = (0..batch * heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / heads, bh % heads);
                let rows = b * seq_len..(b + 1) * seq_len;
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows, cols]);
                let len = lengths[b].max(1).min(seq_len);
                let logits = qb.dot(&kb.slice(s![..len, ..]).t()) * scale;
                let mut probs = vec![0.0; seq_len * seq_len];
                for i in 0..seq_len {
                    let row = logits.row(i);
                    let lse = log_sum_exp(row.iter().copied());
                    for j in 0..len {
                        probs[i * seq_len + j] = (row[j] - lse).exp();
                    }
                }
                let mut weights = Array2::from_shape_vec((seq_len, seq_len), probs.clone()).unwrap();
                if let Some(keep) = &keep {
                    let mask = ndarray::ArrayView2::from_shape((seq_len, seq_len), &keep[bh]).unwrap();
                    weights *= &mask;
                }
                let out = weights.dot(&vb);
                (probs, out)
            })
            .collect();

        let mut value = Array2::<f64>::zeros((batch * seq_len, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for (bh, (p, out)) in results.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            value
                .slice_mut(s![b * seq_len..(b + 1) * seq_len, h * dh..(h + 1) * dh])
                .assign(&out);
            probs.push(p);
        }
        let cache = AttentionCache { q, k, v, batch, seq_len, heads, probs, keep };
        self.push(value, Op::Attention(Box::new(cache)))
    }

    /// Rows scaled to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut value = xv.clone();
        for (mut row, &n) in value.outer_iter_mut().zip(&norms) {
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(value, Op::RowNormalize { x, norms })
    }

    /// Per-row dot products as an n×1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let vals: Vec<f64> = av.outer_iter().zip(bv.outer_iter()).map(|(x, y)| x.dot(&y)).collect();
        let n = vals.len();
        let value = Array2::from_shape_vec((n, 1), vals).unwrap();
        self.push(value, Op::RowDot(a, b))
    }

    /// Row i of `a` scaled by `col[i]` (col is n×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn column(&mut self, a: Var, col: usize) -> Var {
        let value = self.value(a).slice(s![.., col..col + 1]).to_owned();
        self.push(value, Op::Column(a, col))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = scalar(m.sum() / m.len() as f64);
        self.push(value, Op::Mean(a))
    }

    fn extreme(&mut self, a: Var, want_max: bool) -> Var {
        let m = self.value(a);
        let mut at = (0, 0);
        let mut best = m[[0, 0]];
        for ((i, j), &v) in m.indexed_iter() {
            if (want_max && v > best) || (!want_max && v < best) {
                best = v;
                at = (i, j);
            }
        }
        self.push(scalar(best), Op::Extreme { x: a, at })
    }

    /// Minimum entry (subgradient routed to the first minimizer).
    pub fn min_all(&mut self, a: Var) -> Var {
        self.extreme(a, false)
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        self.extreme(a, true)
    }

    /// `a - s` with `s` a 1×1 scalar node.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a).mapv(|x| x - sv);
        self.push(value, Op::SubScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a).mapv(|x| x * sv);
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a).mapv(|x| x / sv);
        self.push(value, Op::DivScalar(a, s))
    }

    /// Weighted InfoNCE with row-wise anchors against a candidate set:
    /// `Σ_i w_i · (logsumexp_j(a_i·c_j/τ) − a_i·c_{pos_i}/τ)`.
    /// Anchors and candidates are used as given (normalize beforehand for
    /// cosine similarity).
    pub fn weighted_info_nce(&mut self, anchors: Var, candidates: Var, weights: Var, positives: Vec<usize>, tau: f64) -> Var {
        let (av, cv, wv) = (self.value(anchors), self.value(candidates), self.value(weights));
        assert_eq!(av.nrows(), positives.len());
        assert_eq!(wv.dim(), (av.nrows(), 1));
        let mut probs = av.dot(&cv.t()) / tau;
        let mut terms = Vec::with_capacity(av.nrows());
        let mut total = 0.0;
        for (i, mut row) in probs.outer_iter_mut().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            let term = lse - row[positives[i]];
            total += wv[[i, 0]] * term;
            terms.push(term);
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push(
            scalar(total),
            Op::InfoNce { anchors, candidates, weights, positives, tau, probs, terms },
        )
    }

    /// Mean over rows of `−log softmax(scores_i)[target_i]`.
    pub fn softmax_cross_entropy(&mut self, scores: Var, targets: Vec<usize>) -> Var {
        let mut probs = self.value(scores).clone();
        assert_eq!(probs.nrows(), targets.len());
        let mut total = 0.0;
        for (i, mut row) in probs.outer_iter_mut().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            total += lse - row[targets[i]];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let n = targets.len().max(1) as f64;
        self.push(scalar(total / n), Op::SoftmaxXent { scores, targets, probs })
    }

    /// `Σ_i φ_i log(φ_i / max(ω_i, ε))` for a column of weights.
    pub fn kl_to_target(&mut self, omega: Var, phi: Vec<f64>, eps: f64) -> Var {
        let ov = self.value(omega);
        assert_eq!(ov.len(), phi.len());
        let total: f64 = ov
            .iter()
            .zip(&phi)
            .map(|(&w, &p)| if p > 0.0 { p * (p / w.max(eps)).ln() } else { 0.0 })
            .sum();
        self.push(scalar(total), Op::Kl { omega, phi, eps })
    }

    /// Gradients of scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, delta: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulBT(a, b) => {
                acc(grads, *a, g.dot(self.value(*b)));
                acc(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::MulConst(a, c) => acc(grads, *a, g * c.as_ref()),
            Op::Affine(a, scale) => acc(grads, *a, g * *scale),
            Op::Gather(a, rows) => {
                let mut delta = Array2::<f64>::zeros(self.value(*a).dim());
                for (i, &r) in rows.iter().enumerate() {
                    delta.row_mut(r).scaled_add(1.0, &g.row(i));
                }
                acc(grads, *a, delta);
            }
            Op::SpMM(m, a) => acc(grads, *a, m.spmm_t(g.view())),
            Op::Gelu(a) => {
                let mut delta = g.clone();
                Zip::from(&mut delta).and(self.value(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                acc(grads, *a, delta);
            }
            Op::Sigmoid(a) => {
                let mut delta = g.clone();
                Zip::from(&mut delta).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                acc(grads, *a, delta);
            }
            Op::Clamp(a, lo, hi) => {
                let mut delta = g.clone();
                Zip::from(&mut delta).and(self.value(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                acc(grads, *a, delta);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma);
                acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gam;
                let m = xhat.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(xhat.dim());
                for (r, mut out) in dx.outer_iter_mut().enumerate() {
                    let dxr = dxhat.row(r);
                    let xr = xhat.row(r);
                    let sum_d = dxr.sum();
                    let sum_dx = dxr.dot(&xr);
                    for c in 0..out.len() {
                        out[c] = inv_std[r] / m * (m * dxr[c] - sum_d - xr[c] * sum_dx);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, mut out) in dx.outer_iter_mut().enumerate() {
                    let n = norms[r];
                    if n > 0.0 {
                        let proj = out.dot(&y.row(r));
                        out.scaled_add(-proj, &y.row(r));
                        out /= n;
                    } else {
                        out.fill(0.0);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let gc = g.column(0).insert_axis(Axis(1));
                acc(grads, *a, self.value(*b) * &gc);
                acc(grads, *b, self.value(*a) * &gc);
            }
            Op::MulCol(a, col) => {
                acc(grads, *a, g * self.value(*col));
                let dc: Vec<f64> = g
                    .outer_iter()
                    .zip(self.value(*a).outer_iter())
                    .map(|(gr, ar)| gr.dot(&ar))
                    .collect();
                let n = dc.len();
                acc(grads, *col, Array2::from_shape_vec((n, 1), dc).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = g * y;
                for (r, mut out) in dx.outer_iter_mut().enumerate() {
                    let dot = g.row(r).dot(&y.row(r));
                    out.scaled_add(-dot, &y.row(r));
                }
                acc(grads, *a, dx);
            }
            Op::Column(a, col) => {
                let mut delta = Array2::<f64>::zeros(self.value(*a).dim());
                delta.slice_mut(s![.., *col..*col + 1]).assign(g);
                acc(grads, *a, delta);
            }
            Op::Sum(a) => acc(grads, *a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let m = self.value(*a);
                acc(grads, *a, Array2::from_elem(m.dim(), g[[0, 0]] / m.len() as f64));
            }
            Op::Extreme { x, at } => {
                let mut delta = Array2::<f64>::zeros(self.value(*x).dim());
                delta[*at] = g[[0, 0]];
                acc(grads, *x, delta);
            }
            Op::SubScalar(a, s) => {
                acc(grads, *a, g.clone());
                acc(grads, *s, scalar(-g.sum()));
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                acc(grads, *a, g * sv);
                acc(grads, *s, scalar((g * self.value(*a)).sum()));
            }
            Op::DivScalar(a, s) => {
                let sv = self.scalar_value(*s);
                acc(grads, *a, g / sv);
                acc(grads, *s, scalar(-(g * &node.value).sum() / sv));
            }
            Op::InfoNce { anchors, candidates, weights, positives, tau, probs, terms } => {
                let g0 = g[[0, 0]];
                let wv = self.value(*weights);
                let mut ds = probs.clone();
                for (i, mut row) in ds.outer_iter_mut().enumerate() {
                    row[positives[i]] -= 1.0;
                    row *= wv[[i, 0]] * g0 / tau;
                }
                acc(grads, *anchors, ds.dot(self.value(*candidates)));
                acc(grads, *candidates, ds.t().dot(self.value(*anchors)));
                let dw: Vec<f64> = terms.iter().map(|t| t * g0).collect();
                let n = dw.len();
                acc(grads, *weights, Array2::from_shape_vec((n, 1), dw).unwrap());
            }
            Op::SoftmaxXent { scores, targets, probs } => {
                let scale = g[[0, 0]] / targets.len().max(1) as f64;
                let mut ds = probs.clone();
                for (i, mut row) in ds.outer_iter_mut().enumerate() {
                    row[targets[i]] -= 1.0;
                    row *= scale;
                }
                acc(grads, *scores, ds);
            }
            Op::Kl { omega, phi, eps } => {
                let g0 = g[[0, 0]];
                let ov = self.value(*omega);
                let mut delta = Array2::<f64>::zeros(ov.dim());
                for ((d, &w), &p) in delta.iter_mut().zip(ov.iter()).zip(phi) {
                    if w > *eps {
                        *d = -g0 * p / w;
                    }
                }
                acc(grads, *omega, delta);
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.ncols();
        let (t, heads) = (c.seq_len, c.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let parts: Vec<(Mat, Mat, Mat)> = (0..c.batch * heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / heads, bh % heads);
                let rows = b * t..(b + 1) * t;
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![rows.clone(), cols.clone()]);
                let kb = kv.slice(s![rows.clone(), cols.clone()]);
                let vb = vv.slice(s![rows.clone(), cols.clone()]);
                let gb = g.slice(s![rows, cols]);
                let probs = ndarray::ArrayView2::from_shape((t, t), &c.probs[bh]).unwrap();
                let weights = match &c.keep {
                    Some(keep) => &probs * &ndarray::ArrayView2::from_shape((t, t), &keep[bh]).unwrap(),
                    None => probs.to_owned(),
                };
                let dv = weights.t().dot(&gb);
                let mut dp = gb.dot(&vb.t());
                if let Some(keep) = &c.keep {
                    dp *= &ndarray::ArrayView2::from_shape((t, t), &keep[bh]).unwrap();
                }
                // softmax adjoint, masked entries have zero probability
                let mut ds = &dp * &probs;
                for i in 0..t {
                    let dot = dp.row(i).dot(&probs.row(i));
                    let mut row = ds.row_mut(i);
                    row.scaled_add(-dot, &probs.row(i));
                }
                ds *= scale;
                let dq = ds.dot(&kb);
                let dk = ds.t().dot(&qb);
                (dq, dk, dv)
            })
            .collect();

        let mut dq = Array2::<f64>::zeros(qv.dim());
        let mut dk = Array2::<f64>::zeros(kv.dim());
        let mut dv = Array2::<f64>::zeros(vv.dim());
        for (bh, (q_part, k_part, v_part)) in parts.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            let sl = s![b * t..(b + 1) * t, h * dh..(h + 1) * dh];
            dq.slice_mut(sl).assign(&q_part);
            dk.slice_mut(sl).assign(&k_part);
            dv.slice_mut(sl).assign(&v_part);
        }
        let acc = |grads: &mut [Option<Mat>], v: Var, delta: Mat| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        acc(grads, c.q, dq);
        acc(grads, c.k, dk);
        acc(grads, c.v, dv);
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape when the node was unreachable.
    pub fn get_or_zeros(&self, v: Var, dim: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(dim))
    }
}
