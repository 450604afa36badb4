//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows the parameter store immutably, records every operation
//! as a node, and [`Graph::backward`] walks the tape in reverse. Parameters are
//! referenced in place, never copied.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Probability floor used by the log-based losses.
pub const PROB_FLOOR: f64 = 1e-8;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows { x: Var, ranges: Vec<(usize, usize)> },
    PairFeatures { a: Var, b: Var },
    GridPad { x: Var, h: usize, w: usize, pw: usize },
    GridCrop { x: Var, w: usize, ch: usize, cw: usize },
    Im2Col3 { x: Var, h: usize, w: usize },
    AvgPool2 { x: Var, w: usize },
    Upsample2 { x: Var, h: usize, w: usize },
    MulConst { x: Var, c: Tensor },
    SoftMerge { p: Var, r: Var, alpha: f64 },
    HardMerge { p: Var, keep: Vec<bool> },
    FloorRenorm { x: Var, floor: f64 },
    Nll { p: Var, gold: Vec<usize>, weights: Vec<f64>, denom: f64 },
    Bce { p: Var, labels: Vec<f64> },
    Kl { p: Var, q: Var },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass, one slot per parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.params.get(*i),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: crate::params::ParamId) -> Var {
        let i = id.index();
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(i), op: Op::Param(i), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm_acc(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.cols);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm_nt_acc(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.rows);
        self.push(out, Op::MatMulNt(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!((1, tx.cols), tb.shape(), "bias shape mismatch");
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&tb.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows, ta.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|v| v * s).collect());
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::tanh(GELU_K * (v + 0.044715 * v * v * v))))
            .collect();
        let out = Tensor::from_vec(t.rows, t.cols, data);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&v| libm::tanh(v)).collect());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = tx.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * tg.data[c] + tb.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.rows, "row slice out of range");
        let out = Tensor::from_vec(len, t.cols, t.data[start * t.cols..(start + len) * t.cols].to_vec());
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols, "column slice out of range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// One output row per `[start, end)` range: the mean of those rows of `x`.
    pub fn mean_rows(&mut self, x: Var, ranges: &[(usize, usize)]) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(ranges.len(), t.cols);
        for (k, &(s, e)) in ranges.iter().enumerate() {
            assert!(e > s && e <= t.rows, "mean_rows over an empty or invalid range");
            let inv = 1.0 / (e - s) as f64;
            let o = out.row_mut(k);
            for r in s..e {
                for (ov, v) in o.iter_mut().zip(t.row(r)) {
                    *ov += v;
                }
            }
            for ov in o.iter_mut() {
                *ov *= inv;
            }
        }
        self.push(out, Op::MeanRows { x, ranges: ranges.to_vec() }, &[x])
    }

    /// For `a: n_a x d`, `b: n_b x d`, row `i * n_b + j` of the output is
    /// `[a_i * b_j, |a_i - b_j|, cos(a_i, b_j)]`, width `2d + 1`.
    pub fn pair_features(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "pair_features width mismatch");
        let d = ta.cols;
        let width = 2 * d + 1;
        let na: Vec<f64> = (0..ta.rows).map(|i| libm::sqrt(dot(ta.row(i), ta.row(i)) + NORM_EPS)).collect();
        let nb: Vec<f64> = (0..tb.rows).map(|j| libm::sqrt(dot(tb.row(j), tb.row(j)) + NORM_EPS)).collect();
        let mut out = Tensor::zeros(ta.rows * tb.rows, width);
        for i in 0..ta.rows {
            let ai = ta.row(i);
            for j in 0..tb.rows {
                let bj = tb.row(j);
                let o = out.row_mut(i * tb.rows + j);
                for k in 0..d {
                    o[k] = ai[k] * bj[k];
                    o[d + k] = libm::fabs(ai[k] - bj[k]);
                }
                o[2 * d] = dot(ai, bj) / (na[i] * nb[j]);
            }
        }
        self.push(out, Op::PairFeatures { a, b }, &[a, b])
    }

    /// Zero-pads an `h x w` grid (bottom and right) to `ph x pw`.
    pub fn grid_pad(&mut self, x: Var, h: usize, w: usize, ph: usize, pw: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows, h * w);
        assert!(ph >= h && pw >= w);
        let c = t.cols;
        let mut out = Tensor::zeros(ph * pw, c);
        for y in 0..h {
            for xx in 0..w {
                out.row_mut(y * pw + xx).copy_from_slice(t.row(y * w + xx));
            }
        }
        let _ = c;
        self.push(out, Op::GridPad { x, h, w, pw }, &[x])
    }

    /// Keeps the top-left `ch x cw` corner of an `h x w` grid.
    pub fn grid_crop(&mut self, x: Var, h: usize, w: usize, ch: usize, cw: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows, h * w);
        assert!(ch <= h && cw <= w);
        let mut out = Tensor::zeros(ch * cw, t.cols);
        for y in 0..ch {
            for xx in 0..cw {
                out.row_mut(y * cw + xx).copy_from_slice(t.row(y * w + xx));
            }
        }
        self.push(out, Op::GridCrop { x, w, ch, cw }, &[x])
    }

    /// 3x3 neighbourhoods with zero padding: `(h*w) x c` to `(h*w) x 9c`.
    pub fn im2col3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows, h * w);
        let c = t.cols;
        let mut out = Tensor::zeros(h * w, 9 * c);
        for y in 0..h {
            for xx in 0..w {
                let o = out.row_mut(y * w + xx);
                for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = sy as usize * w + sx as usize;
                    o[k * c..(k + 1) * c].copy_from_slice(t.row(src));
                }
            }
        }
        self.push(out, Op::Im2Col3 { x, h, w }, &[x])
    }

    /// 2x2 average pooling, stride 2; `h` and `w` must be even.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        assert!(h % 2 == 0 && w % 2 == 0 && t.rows == h * w);
        let (oh, ow, c) = (h / 2, w / 2, t.cols);
        let mut out = Tensor::zeros(oh * ow, c);
        for y in 0..oh {
            for xx in 0..ow {
                let o = out.row_mut(y * ow + xx);
                for (sy, sx) in [(2 * y, 2 * xx), (2 * y, 2 * xx + 1), (2 * y + 1, 2 * xx), (2 * y + 1, 2 * xx + 1)] {
                    for (ov, v) in o.iter_mut().zip(t.row(sy * w + sx)) {
                        *ov += 0.25 * v;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2 { x, w }, &[x])
    }

    /// Nearest-neighbour 2x upsampling of an `h x w` grid.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows, h * w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(oh * ow, t.cols);
        for y in 0..oh {
            for xx in 0..ow {
                out.row_mut(y * ow + xx).copy_from_slice(t.row((y / 2) * w + xx / 2));
            }
        }
        self.push(out, Op::Upsample2 { x, h, w }, &[x])
    }

    /// Elementwise product with a constant. `c` may be `rows x 1`, broadcast
    /// across columns.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let t = self.value(x);
        assert!(c.rows == t.rows && (c.cols == t.cols || c.cols == 1), "mul_const shape mismatch");
        let mut out = t.clone();
        for r in 0..t.rows {
            for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                *v *= if c.cols == 1 { c.data[r] } else { c.data[r * c.cols + k] };
            }
        }
        self.push(out, Op::MulConst { x, c }, &[x])
    }

    /// Soft relevance merge of `n x 3` cell distributions with a per-cell
    /// relevance column `r: n x 1`.
    pub fn soft_merge(&mut self, p: Var, r: Var, alpha: f64) -> Var {
        let (tp, tr) = (self.value(p), self.value(r));
        assert_eq!(tp.cols, 3);
        assert_eq!(tr.shape(), (tp.rows, 1));
        let mut out = Tensor::zeros(tp.rows, 3);
        for i in 0..tp.rows {
            let merged = crate::heads::soft_merge_cell([tp.get(i, 0), tp.get(i, 1), tp.get(i, 2)], tr.data[i], alpha);
            out.row_mut(i).copy_from_slice(&merged);
        }
        self.push(out, Op::SoftMerge { p, r, alpha }, &[p, r])
    }

    /// Cells whose `keep` flag is false become `(1, 0, 0)`.
    pub fn hard_merge(&mut self, p: Var, keep: Vec<bool>) -> Var {
        let tp = self.value(p);
        assert_eq!(tp.cols, 3);
        assert_eq!(keep.len(), tp.rows);
        let mut out = tp.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).copy_from_slice(&[1.0, 0.0, 0.0]);
            }
        }
        self.push(out, Op::HardMerge { p, keep }, &[p])
    }

    /// Clamps every entry to at least `floor` and renormalizes each row.
    pub fn floor_renorm(&mut self, x: Var, floor: f64) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for v in row.iter_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::FloorRenorm { x, floor }, &[x])
    }

    /// Weighted negative log-likelihood of `gold` under the row
    /// distributions of `p`, normalized by the total weight.
    pub fn nll(&mut self, p: Var, gold: &[usize], weights: &[f64]) -> Var {
        let tp = self.value(p);
        assert_eq!(gold.len(), tp.rows);
        assert_eq!(weights.len(), tp.rows);
        let denom: f64 = weights.iter().sum();
        let mut total = 0.0;
        if denom > 0.0 {
            for i in 0..tp.rows {
                let q = tp.get(i, gold[i]).max(PROB_FLOOR);
                total += weights[i] * -libm::log(q);
            }
            total /= denom;
        }
        let op = Op::Nll { p, gold: gold.to_vec(), weights: weights.to_vec(), denom };
        self.push(Tensor::scalar(total), op, &[p])
    }

    /// Mean binary cross-entropy of probabilities `p: n x 1` against labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Var {
        let tp = self.value(p);
        assert_eq!(tp.shape(), (labels.len(), 1));
        let n = labels.len().max(1) as f64;
        let total: f64 = tp.data.iter().zip(labels).map(|(&q, &y)| bce_term(q, y)).sum();
        self.push(Tensor::scalar(total / n), Op::Bce { p, labels: labels.to_vec() }, &[p])
    }

    /// `KL(p || q)` for two `1 x k` distributions.
    pub fn kl(&mut self, p: Var, q: Var) -> Var {
        let (tp, tq) = (self.value(p), self.value(q));
        assert_eq!(tp.shape(), tq.shape());
        let v = tp.data.iter().zip(&tq.data).map(|(&a, &b)| a * (libm::log(a) - libm::log(b))).sum();
        self.push(Tensor::scalar(v), Op::Kl { p, q }, &[p, q])
    }

    /// `sum_i w_i * v_i` over `1 x 1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut v = 0.0;
        for &(x, w) in terms {
            v += w * self.value(x).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), &vars)
    }

    /// Reverse pass from a scalar node; returns gradients for every parameter
    /// that participated in the graph.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = ParamGrads { grads: vec![None; self.params.len()] };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Param(p) = self.nodes[idx].op {
                out.grads[p] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                self.acc(grads, *a, |ga| gemm_nt_acc(&g.data, &tb.data, &mut ga.data, m, n, k));
                self.acc(grads, *b, |gb| gemm_tn_acc(&ta.data, &g.data, &mut gb.data, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows, ta.cols, tb.rows);
                self.acc(grads, *a, |ga| gemm_acc(&g.data, &tb.data, &mut ga.data, m, n, k));
                self.acc(grads, *b, |gb| gemm_tn_acc(&g.data, &ta.data, &mut gb.data, m, n, k));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |gx| gx.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for (o, v) in gb.data.iter_mut().zip(&g.data) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.data.iter_mut().zip(&g.data).zip(&tb.data) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gv), av) in gb.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx.data.iter_mut().zip(&g.data) {
                        *o += s * v;
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for ((o, gv), &v) in gx.data.iter_mut().zip(&g.data).zip(&tx.data) {
                        let inner = GELU_K * (v + 0.044715 * v * v * v);
                        let t = libm::tanh(inner);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * v * v);
                        *o += gv * d;
                    }
                });
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, |gx| {
                    for ((o, gv), yv) in gx.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                self.acc(grads, *x, |gx| {
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                self.acc(grads, *beta, |gb| {
                    for r in 0..rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for ((o, v), h) in gg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += v * h;
                        }
                    }
                });
                self.acc(grads, *x, |gx| {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        for c in 0..cols {
                            dxhat[c] = gr[c] * tg.data[c];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, hr);
                        let inv = inv_std[r];
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += inv / n * (n * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                self.acc(grads, *table, |gt| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                self.acc(grads, *x, |gx| {
                    let c = gx.cols;
                    for (o, v) in gx.data[start * c..start * c + g.data.len()].iter_mut().zip(&g.data) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                self.acc(grads, *x, |gx| {
                    for r in 0..g.rows {
                        for (o, v) in gx.row_mut(r)[*start..start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    self.acc(grads, p, |gp| {
                        for r in 0..g.rows {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| {
                        for (o, v) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                            *o += v;
                        }
                    });
                    off += n;
                }
            }
            Op::MeanRows { x, ranges } => {
                self.acc(grads, *x, |gx| {
                    for (k, &(s, e)) in ranges.iter().enumerate() {
                        let inv = 1.0 / (e - s) as f64;
                        for r in s..e {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            Op::PairFeatures { a, b } => self.backprop_pairs(*a, *b, g, y, grads),
            Op::GridPad { x, h, w, pw } => {
                self.acc(grads, *x, |gx| {
                    for yy in 0..*h {
                        for xx in 0..*w {
                            for (o, v) in gx.row_mut(yy * w + xx).iter_mut().zip(g.row(yy * pw + xx)) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::GridCrop { x, w, ch, cw } => {
                self.acc(grads, *x, |gx| {
                    for yy in 0..*ch {
                        for xx in 0..*cw {
                            for (o, v) in gx.row_mut(yy * w + xx).iter_mut().zip(g.row(yy * cw + xx)) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::Im2Col3 { x, h, w } => {
                let (h, w) = (*h, *w);
                self.acc(grads, *x, |gx| {
                    let c = gx.cols;
                    for yy in 0..h {
                        for xx in 0..w {
                            let gr = g.row(yy * w + xx);
                            for (k, (dy, dx)) in NEIGHBOURS.iter().enumerate() {
                                let (sy, sx) = (yy as isize + dy, xx as isize + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let dst = gx.row_mut(sy as usize * w + sx as usize);
                                for (o, v) in dst.iter_mut().zip(&gr[k * c..(k + 1) * c]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { x, w } => {
                let w = *w;
                let ow = w / 2;
                self.acc(grads, *x, |gx| {
                    for oy in 0..g.rows / ow {
                        for ox in 0..ow {
                            let gr = g.row(oy * ow + ox);
                            for (sy, sx) in [(2 * oy, 2 * ox), (2 * oy, 2 * ox + 1), (2 * oy + 1, 2 * ox), (2 * oy + 1, 2 * ox + 1)] {
                                for (o, v) in gx.row_mut(sy * w + sx).iter_mut().zip(gr) {
                                    *o += 0.25 * v;
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { x, h, w } => {
                let (h, w) = (*h, *w);
                self.acc(grads, *x, |gx| {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            for (o, v) in gx.row_mut((yy / 2) * w + xx / 2).iter_mut().zip(g.row(yy * 2 * w + xx)) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::MulConst { x, c } => {
                self.acc(grads, *x, |gx| {
                    for r in 0..g.rows {
                        for (k, (o, v)) in gx.row_mut(r).iter_mut().zip(g.row(r)).enumerate() {
                            *o += v * if c.cols == 1 { c.data[r] } else { c.data[r * c.cols + k] };
                        }
                    }
                });
            }
            Op::SoftMerge { p, r, alpha } => {
                // y = (p + r * (0, alpha, 1 - alpha)) / (1 + r)
                let tr = self.value(*r);
                self.acc(grads, *p, |gp| {
                    for i in 0..gp.rows {
                        let s = 1.0 + tr.data[i];
                        for k in 0..3 {
                            gp.data[i * 3 + k] += g.get(i, k) / s;
                        }
                    }
                });
                self.acc(grads, *r, |gr| {
                    for i in 0..gr.rows {
                        let s = 1.0 + tr.data[i];
                        let gi = g.row(i);
                        gr.data[i] += (alpha * gi[1] + (1.0 - alpha) * gi[2] - dot(gi, y.row(i))) / s;
                    }
                });
            }
            Op::HardMerge { p, keep } => {
                self.acc(grads, *p, |gp| {
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            for (o, v) in gp.row_mut(i).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::FloorRenorm { x, floor } => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for r in 0..tx.rows {
                        let s: f64 = tx.row(r).iter().map(|v| v.max(*floor)).sum();
                        let proj = dot(g.row(r), y.row(r));
                        for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                            if tx.get(r, k) > *floor {
                                *o += (g.get(r, k) - proj) / s;
                            }
                        }
                    }
                });
            }
            Op::Nll { p, gold, weights, denom } => {
                let tp = self.value(*p);
                let gs = g.item();
                if *denom > 0.0 {
                    self.acc(grads, *p, |gp| {
                        for i in 0..tp.rows {
                            let q = tp.get(i, gold[i]);
                            if q > PROB_FLOOR {
                                gp.data[i * gp.cols + gold[i]] -= gs * weights[i] / (q * denom);
                            }
                        }
                    });
                }
            }
            Op::Bce { p, labels } => {
                let tp = self.value(*p);
                let gs = g.item() / labels.len().max(1) as f64;
                self.acc(grads, *p, |gp| {
                    for (i, (&q, &lab)) in tp.data.iter().zip(labels).enumerate() {
                        let mut d = 0.0;
                        if q > PROB_FLOOR {
                            d -= lab / q;
                        }
                        if 1.0 - q > PROB_FLOOR {
                            d += (1.0 - lab) / (1.0 - q);
                        }
                        gp.data[i] += gs * d;
                    }
                });
            }
            Op::Kl { p, q } => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let gs = g.item();
                self.acc(grads, *p, |gp| {
                    for ((o, &a), &b) in gp.data.iter_mut().zip(&tp.data).zip(&tq.data) {
                        *o += gs * (libm::log(a) - libm::log(b) + 1.0);
                    }
                });
                self.acc(grads, *q, |gq| {
                    for ((o, &a), &b) in gq.data.iter_mut().zip(&tp.data).zip(&tq.data) {
                        *o -= gs * a / b;
                    }
                });
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(x, w) in terms {
                    self.acc(grads, x, |gx| gx.data[0] += gs * w);
                }
            }
        }
    }

    fn backprop_pairs(&self, a: Var, b: Var, g: &Tensor, y: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.cols;
        let nbr = tb.rows;
        let na: Vec<f64> = (0..ta.rows).map(|i| libm::sqrt(dot(ta.row(i), ta.row(i)) + NORM_EPS)).collect();
        let nb: Vec<f64> = (0..tb.rows).map(|j| libm::sqrt(dot(tb.row(j), tb.row(j)) + NORM_EPS)).collect();
        let mut ga = Tensor::zeros(ta.rows, d);
        let mut gb = Tensor::zeros(tb.rows, d);
        for i in 0..ta.rows {
            let ai = ta.row(i);
            for j in 0..nbr {
                let bj = tb.row(j);
                let row = i * nbr + j;
                let gr = g.row(row);
                let cos = y.get(row, 2 * d);
                let gc = gr[2 * d];
                let inv = 1.0 / (na[i] * nb[j]);
                let (ca, cb) = (cos / (na[i] * na[i]), cos / (nb[j] * nb[j]));
                let gai = ga.row_mut(i);
                for k in 0..d {
                    let s = sign(ai[k] - bj[k]);
                    gai[k] += gr[k] * bj[k] + gr[d + k] * s + gc * (bj[k] * inv - ca * ai[k]);
                }
                let gbj = gb.row_mut(j);
                for k in 0..d {
                    let s = sign(ai[k] - bj[k]);
                    gbj[k] += gr[k] * ai[k] - gr[d + k] * s + gc * (ai[k] * inv - cb * bj[k]);
                }
            }
        }
        self.acc(grads, a, |t| t.add_assign(&ga));
        self.acc(grads, b, |t| t.add_assign(&gb));
    }
}

const NEIGHBOURS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn bce_term(q: f64, y: f64) -> f64 {
    -(y * libm::log(q.max(PROB_FLOOR)) + (1.0 - y) * libm::log((1.0 - q).max(PROB_FLOOR)))
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl ParamGrads {
    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.grads[i].as_ref()
    }

    /// Accumulates another set of gradients into this one.
    pub fn merge(&mut self, other: ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(other.grads) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(&y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }
}
