//! Task heads over encoder outputs: context selection, context matching, the
//! U-Net edit grid, relevance merging and the intention projections.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, PROB_FLOOR};
use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    Soft,
    Hard,
    Off,
}

impl MergeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::Soft => "SOFT",
            MergeMode::Hard => "HARD",
            MergeMode::Off => "OFF",
        }
    }
}

/// Probability that each context utterance is relevant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector(pub Vec<f64>);

/// `n_context x n_incomplete` cells of `[none, insert, replace]` probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEditGrid {
    pub n_context: usize,
    pub n_incomplete: usize,
    pub cells: Vec<[f64; 3]>,
    pub merged: bool,
}

impl PredictedEditGrid {
    pub fn from_tensor(t: &Tensor, n_context: usize, n_incomplete: usize, merged: bool) -> Self {
        assert_eq!(t.shape(), (n_context * n_incomplete, 3));
        let cells = (0..t.rows).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect();
        PredictedEditGrid { n_context, n_incomplete, cells, merged }
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 3] {
        self.cells[i * self.n_incomplete + j]
    }

    pub fn view(&self) -> crate::supervision::GridView<'_> {
        crate::supervision::GridView::Probs { n_context: self.n_context, n_incomplete: self.n_incomplete, cells: &self.cells }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionPair {
    pub p_ctx: Vec<f64>,
    pub p_rw: Vec<f64>,
}

/// Adds `alpha * r` to INSERT and `(1 - alpha) * r` to REPLACE, then
/// renormalizes the (already normalized) cell by `1 + r`.
pub fn soft_merge_cell(p: [f64; 3], r: f64, alpha: f64) -> [f64; 3] {
    let s = 1.0 + r;
    [p[0] / s, (p[1] + alpha * r) / s, (p[2] + (1.0 - alpha) * r) / s]
}

/// Rows whose owning utterance has relevance below `tau` lose all
/// INSERT/REPLACE mass.
pub fn hard_merge_cell(p: [f64; 3], r: f64, tau: f64) -> [f64; 3] {
    if r < tau {
        [1.0, 0.0, 0.0]
    } else {
        p
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Relevance merging on a detached grid. `owners[i]` is the context
/// utterance of grid row `i`.
pub fn merge_relevance(
    p: &PredictedEditGrid,
    r: &RelevanceVector,
    owners: &[usize],
    alpha: f64,
    mode: MergeMode,
    tau: f64,
) -> Result<PredictedEditGrid> {
    check_alpha(alpha)?;
    if owners.len() != p.n_context {
        return Err(Error::DimensionMismatch(format!("{} owners for {} rows", owners.len(), p.n_context)));
    }
    let mut out = p.clone();
    out.merged = true;
    if mode == MergeMode::Off {
        return Ok(out);
    }
    for i in 0..p.n_context {
        let ri = *r.0.get(owners[i]).ok_or_else(|| Error::DimensionMismatch(format!("no relevance for utterance {}", owners[i])))?;
        for j in 0..p.n_incomplete {
            let c = &mut out.cells[i * p.n_incomplete + j];
            *c = match mode {
                MergeMode::Soft => soft_merge_cell(*c, ri, alpha),
                MergeMode::Hard => hard_merge_cell(*c, ri, tau),
                MergeMode::Off => *c,
            };
        }
    }
    Ok(out)
}

/// Relevance merging inside a graph. `probs` is `(n_context * n_incomplete) x 3`,
/// `relevance` is `n_utterances x 1`.
#[allow(clippy::too_many_arguments)]
pub fn merge_in_graph(
    g: &mut Graph<'_>,
    probs: Var,
    relevance: Var,
    owners: &[usize],
    n_incomplete: usize,
    alpha: f64,
    mode: MergeMode,
    tau: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    let cell_owner: Vec<usize> = owners.iter().flat_map(|&k| core::iter::repeat_n(k, n_incomplete)).collect();
    Ok(match mode {
        MergeMode::Off => probs,
        MergeMode::Soft => {
            let rc = g.gather_rows(relevance, &cell_owner);
            g.soft_merge(probs, rc, alpha)
        }
        MergeMode::Hard => {
            let r = g.value(relevance);
            let keep = cell_owner.iter().map(|&k| r.data[k] >= tau).collect();
            g.hard_merge(probs, keep)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            l1: Linear::new(store, init, &format!("{name}.l1"), d_in, hidden),
            l2: Linear::new(store, init, &format!("{name}.l2"), hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }
}

fn repeat_row(g: &mut Graph<'_>, x: Var, n: usize) -> Var {
    g.gather_rows(x, &vec![0; n])
}

/// `r_i = P(relevant | [c_i; u])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectHead {
    pub mlp: Mlp,
}

impl SelectHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize) -> Self {
        SelectHead { mlp: Mlp::new(store, init, "select", 2 * d, d, 2) }
    }

    /// `c: n x d`, `u: 1 x d`; returns `n x 1` probabilities.
    pub fn forward(&self, g: &mut Graph<'_>, c: Var, u: Var) -> Var {
        let n = g.value(c).rows;
        let ur = repeat_row(g, u, n);
        let x = g.concat_cols(&[c, ur]);
        let logits = self.mlp.forward(g, x);
        let p = g.softmax_rows(logits);
        g.slice_cols(p, 1, 1)
    }
}

/// `m = P(match | [c + u; r])` for context or negative utterance vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchHead {
    pub mlp: Mlp,
}

impl MatchHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize) -> Self {
        MatchHead { mlp: Mlp::new(store, init, "match", 2 * d, d, 2) }
    }

    /// `candidates: m x d`, `u, r: 1 x d`; returns `m x 1` probabilities.
    pub fn forward(&self, g: &mut Graph<'_>, candidates: Var, u: Var, r: Var) -> Result<Var> {
        let (cd, ud, rd) = (g.value(candidates).cols, g.value(u).cols, g.value(r).cols);
        if cd != ud || ud != rd {
            return Err(Error::DimensionMismatch(format!("match head widths {cd}, {ud}, {rd}")));
        }
        let m = g.value(candidates).rows;
        let ur = repeat_row(g, u, m);
        let rr = repeat_row(g, r, m);
        let s = g.add(candidates, ur);
        let x = g.concat_cols(&[s, rr]);
        let logits = self.mlp.forward(g, x);
        let p = g.softmax_rows(logits);
        Ok(g.slice_cols(p, 1, 1))
    }
}

/// Projections of `[C; u]` and of `r` into a shared intention space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionHead {
    pub ctx: Mlp,
    pub rw: Mlp,
}

impl IntentionHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize, d_int: usize) -> Self {
        IntentionHead { ctx: Mlp::new(store, init, "intent.ctx", 2 * d, d, d_int), rw: Mlp::new(store, init, "intent.rw", d, d, d_int) }
    }

    /// `(p_ctx, p_rw)`, or `None` when there is no positive context to pool.
    pub fn forward(&self, g: &mut Graph<'_>, c: Var, u: Var, r: Var, positives: &[usize]) -> Option<(Var, Var)> {
        if positives.is_empty() {
            return None;
        }
        let sel = g.gather_rows(c, positives);
        let pooled = g.mean_rows(sel, &[(0, positives.len())]);
        let x = g.concat_cols(&[pooled, u]);
        let p_ctx = project(g, &self.ctx, x);
        let p_rw = project(g, &self.rw, r);
        Some((p_ctx, p_rw))
    }
}

/// `softmax(mlp(x))`, floored at the probability floor and renormalized.
pub fn project(g: &mut Graph<'_>, mlp: &Mlp, x: Var) -> Var {
    let logits = mlp.forward(g, x);
    let p = g.softmax_rows(logits);
    g.floor_renorm(p, PROB_FLOOR)
}

/// Pairwise token features, a depth-2 U-Net over the padded grid and a
/// per-cell 3-way classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditGridHead {
    pub channels: usize,
    proj: Linear,
    enc0: Linear,
    enc1: Linear,
    bottleneck: Linear,
    dec1: Linear,
    dec0: Linear,
    cls: Linear,
}

/// Grid sides are padded to a multiple of this (two 2x poolings).
pub const GRID_MULTIPLE: usize = 4;

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

fn valid_mask(h: usize, w: usize, vh: usize, vw: usize) -> Tensor {
    let mut m = Tensor::zeros(h * w, 1);
    for y in 0..vh {
        for x in 0..vw {
            m.data[y * w + x] = 1.0;
        }
    }
    m
}

impl EditGridHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize, channels: usize) -> Self {
        let (c, half) = (channels, (channels / 2).max(1));
        EditGridHead {
            channels,
            proj: Linear::new(store, init, "grid.proj", 2 * d + 1, c),
            enc0: Linear::new(store, init, "grid.enc0", 9 * c, half),
            enc1: Linear::new(store, init, "grid.enc1", 9 * half, c),
            bottleneck: Linear::new(store, init, "grid.mid", 9 * c, c),
            dec1: Linear::new(store, init, "grid.dec1", 9 * 2 * c, half),
            dec0: Linear::new(store, init, "grid.dec0", 9 * 2 * half, half),
            cls: Linear::new(store, init, "grid.cls", half + c, 3),
        }
    }

    /// Cell probabilities `(n_context * n_incomplete) x 3` from context-token
    /// states `n_context x d` and incomplete-token states `n_incomplete x d`.
    pub fn forward(&self, g: &mut Graph<'_>, ctx: Var, inc: Var) -> Var {
        self.forward_padded(g, ctx, inc, 0)
    }

    /// As [`Self::forward`], with `extra` additional rows and columns of
    /// padding beyond the minimum multiple.
    pub fn forward_padded(&self, g: &mut Graph<'_>, ctx: Var, inc: Var, extra: usize) -> Var {
        let (n_c, n_u) = (g.value(ctx).rows, g.value(inc).rows);
        let (h0, w0) = (round_up(n_c, GRID_MULTIPLE) + extra, round_up(n_u, GRID_MULTIPLE) + extra);
        let (h0, w0) = (round_up(h0, GRID_MULTIPLE), round_up(w0, GRID_MULTIPLE));
        let (h1, w1, h2, w2) = (h0 / 2, w0 / 2, h0 / 4, w0 / 4);
        let m0 = valid_mask(h0, w0, n_c, n_u);
        let m1 = valid_mask(h1, w1, n_c.div_ceil(2), n_u.div_ceil(2));
        let m2 = valid_mask(h2, w2, n_c.div_ceil(4), n_u.div_ceil(4));

        let pairs = g.pair_features(ctx, inc);
        let f = self.proj.forward(g, pairs);
        let f0 = g.grid_pad(f, n_c, n_u, h0, w0);

        let e0 = conv(g, &self.enc0, f0, h0, w0, &m0);
        let p1 = g.avg_pool2(e0, h0, w0);
        let e1 = conv(g, &self.enc1, p1, h1, w1, &m1);
        let p2 = g.avg_pool2(e1, h1, w1);
        let mid = conv(g, &self.bottleneck, p2, h2, w2, &m2);

        let up1 = g.upsample2(mid, h2, w2);
        let cat1 = g.concat_cols(&[up1, e1]);
        let d1 = conv(g, &self.dec1, cat1, h1, w1, &m1);
        let up0 = g.upsample2(d1, h1, w1);
        let cat0 = g.concat_cols(&[up0, e0]);
        let d0 = conv(g, &self.dec0, cat0, h0, w0, &m0);

        let feats = g.concat_cols(&[d0, f0]);
        let logits = self.cls.forward(g, feats);
        let logits = g.grid_crop(logits, h0, w0, n_c, n_u);
        g.softmax_rows(logits)
    }
}

fn conv(g: &mut Graph<'_>, lin: &Linear, x: Var, h: usize, w: usize, mask: &Tensor) -> Var {
    let cols = g.im2col3(x, h, w);
    let y = lin.forward(g, cols);
    let y = g.gelu(y);
    g.mul_const(y, mask.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn soft_merge_worked_cell() {
        let out = soft_merge_cell([0.2, 0.5, 0.3], 0.4, 0.5);
        // (0.2, 0.7, 0.5) / 1.4
        assert!(close(&out, &[1.0 / 7.0, 0.5, 5.0 / 14.0], 1e-12));
    }

    #[test]
    fn hard_merge_worked_cell() {
        assert_eq!(hard_merge_cell([0.2, 0.5, 0.3], 0.3, 0.5), [1.0, 0.0, 0.0]);
        assert_eq!(hard_merge_cell([0.2, 0.5, 0.3], 0.7, 0.5), [0.2, 0.5, 0.3]);
    }

    fn grid() -> PredictedEditGrid {
        PredictedEditGrid {
            n_context: 3,
            n_incomplete: 2,
            cells: vec![[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8], [0.3, 0.3, 0.4], [0.9, 0.05, 0.05], [0.5, 0.25, 0.25]],
            merged: false,
        }
    }

    #[test]
    fn merge_modes() {
        let p = grid();
        let owners = [0, 0, 1];
        let zero = RelevanceVector(vec![0.0, 0.0]);
        let soft = merge_relevance(&p, &zero, &owners, 0.5, MergeMode::Soft, 0.5).unwrap();
        assert_eq!(soft.cells, p.cells);
        let r = RelevanceVector(vec![0.2, 0.9]);
        let hard0 = merge_relevance(&p, &r, &owners, 0.5, MergeMode::Hard, 0.0).unwrap();
        assert_eq!(hard0.cells, p.cells);
        let hard = merge_relevance(&p, &r, &owners, 0.5, MergeMode::Hard, 0.5).unwrap();
        assert_eq!(hard.get(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(hard.get(2, 1), p.get(2, 1));
        let off = merge_relevance(&p, &r, &owners, 0.5, MergeMode::Off, 0.5).unwrap();
        assert_eq!(off.cells, p.cells);
        assert!(off.merged);
        assert!(matches!(merge_relevance(&p, &r, &owners, 1.5, MergeMode::Soft, 0.5), Err(Error::InvalidAlpha(_))));
        for c in merge_relevance(&p, &r, &owners, 0.3, MergeMode::Soft, 0.5).unwrap().cells {
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn dist() -> impl Strategy<Value = [f64; 3]> {
        (0.001f64..1.0, 0.001f64..1.0, 0.001f64..1.0).prop_map(|(a, b, c)| {
            let s = a + b + c;
            [a / s, b / s, c / s]
        })
    }

    proptest! {
        #[test]
        fn soft_merge_is_monotone(p in dist(), r in 0.0f64..1.0, dr in 0.001f64..0.5, alpha in 0.01f64..0.99) {
            let lo = soft_merge_cell(p, r, alpha);
            let hi = soft_merge_cell(p, r + dr, alpha);
            // NONE mass strictly falls, edit mass strictly rises
            prop_assert!(hi[0] < lo[0]);
            prop_assert!(hi[1] + hi[2] > lo[1] + lo[2]);
            // INSERT rises exactly when its share is below alpha
            if p[1] < alpha {
                prop_assert!(hi[1] > lo[1]);
            } else if p[1] > alpha {
                prop_assert!(hi[1] < lo[1]);
            }
            prop_assert!((hi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn soft_merge_keeps_insert_argmax(p in dist(), r in 0.0f64..1.0, alpha in 0.0f64..=1.0) {
            prop_assume!(p[1] > p[0] && p[1] > p[2]);
            let m = soft_merge_cell(p, r, alpha);
            prop_assert!(m[1] > m[0] || m[2] > m[0]);
        }
    }

    fn head_setup(d: usize, channels: usize) -> (ParamStore, EditGridHead, SelectHead, MatchHead, IntentionHead) {
        let mut store = ParamStore::default();
        let mut init = Init::new(5);
        let e = EditGridHead::new(&mut store, &mut init, d, channels);
        let s = SelectHead::new(&mut store, &mut init, d);
        let m = MatchHead::new(&mut store, &mut init, d);
        let i = IntentionHead::new(&mut store, &mut init, d, 6);
        (store, e, s, m, i)
    }

    fn states(rows: usize, cols: usize, seed: u64) -> Tensor {
        Init::new(seed).normal_tensor(rows, cols, 1.0)
    }

    #[test]
    fn edit_grid_shapes_and_normalization() {
        let (store, head, ..) = head_setup(8, 8);
        for (n_c, n_u) in [(1, 1), (5, 3), (8, 4), (13, 7)] {
            let mut g = Graph::new(&store);
            let c = g.constant(states(n_c, 8, 1));
            let u = g.constant(states(n_u, 8, 2));
            let p = head.forward(&mut g, c, u);
            let t = g.value(p);
            assert_eq!(t.shape(), (n_c * n_u, 3));
            for r in 0..t.rows {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn edit_grid_is_deterministic() {
        let run = || {
            let (store, head, ..) = head_setup(8, 8);
            let mut g = Graph::new(&store);
            let c = g.constant(states(6, 8, 1));
            let u = g.constant(states(3, 8, 2));
            let p = head.forward(&mut g, c, u);
            g.value(p).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn edit_grid_padding_equivariance() {
        let (store, head, ..) = head_setup(8, 8);
        for (n_c, n_u) in [(4, 4), (8, 4), (4, 12)] {
            let mut g = Graph::new(&store);
            let c = g.constant(states(n_c, 8, 3));
            let u = g.constant(states(n_u, 8, 4));
            let exact = head.forward(&mut g, c, u);
            let padded = head.forward_padded(&mut g, c, u, 4);
            let padded2 = head.forward_padded(&mut g, c, u, 8);
            assert!(close(&g.value(exact).data, &g.value(padded).data, 1e-6));
            assert!(close(&g.value(exact).data, &g.value(padded2).data, 1e-6));
        }
    }

    #[test]
    fn select_head_contracts() {
        let (mut store, _, sel, ..) = head_setup(4, 4);
        let c_t = states(3, 4, 7);
        let u_t = states(1, 4, 8);
        let run = |store: &ParamStore, c: &Tensor| {
            let mut g = Graph::new(store);
            let cv = g.constant(c.clone());
            let uv = g.constant(u_t.clone());
            let r = sel.forward(&mut g, cv, uv);
            g.value(r).data.clone()
        };
        let r = run(&store, &c_t);
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        // permuting contexts permutes relevance
        let perm = [2usize, 0, 1];
        let mut c_p = Tensor::zeros(3, 4);
        for (k, &src) in perm.iter().enumerate() {
            c_p.row_mut(k).copy_from_slice(c_t.row(src));
        }
        let rp = run(&store, &c_p);
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(rp[k], r[src]);
        }
        // zero output layer gives symmetric logits
        for name in ["select.l2.w", "select.l2.b"] {
            let id = store.id_of(name).unwrap().index();
            store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(run(&store, &c_t).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn match_head_contracts() {
        let (store, _, _, mh, _) = head_setup(4, 4);
        let mut g = Graph::new(&store);
        let u_t = states(1, 4, 9);
        let mut neg_u = u_t.clone();
        neg_u.data.iter_mut().for_each(|v| *v = -*v);
        let cands = Tensor::from_vec(2, 4, [neg_u.data.clone(), states(1, 4, 10).data].concat());
        let cv = g.constant(cands.clone());
        let uv = g.constant(u_t.clone());
        let rv = g.constant(states(1, 4, 11));
        let m = mh.forward(&mut g, cv, uv, rv).unwrap();
        let m_vals = g.value(m).data.clone();
        assert!(m_vals.iter().all(|v| (0.0..=1.0).contains(v)));
        // c = -u zeroes the summed half: same score as an explicit zero vector
        let zero = g.constant(Tensor::zeros(1, 4));
        let zero_u = g.constant(Tensor::zeros(1, 4));
        let mz = mh.forward(&mut g, zero, zero_u, rv).unwrap();
        assert!((g.value(mz).data[0] - m_vals[0]).abs() < 1e-12);
        // swapping candidates swaps scores
        let swapped = Tensor::from_vec(2, 4, [cands.row(1), cands.row(0)].concat());
        let sv = g.constant(swapped);
        let ms = mh.forward(&mut g, sv, uv, rv).unwrap();
        assert_eq!(g.value(ms).data, vec![m_vals[1], m_vals[0]]);
        let bad = g.constant(Tensor::zeros(1, 3));
        assert!(mh.forward(&mut g, bad, uv, rv).is_err());
    }

    #[test]
    fn intention_contracts() {
        let (store, _, _, _, ih) = head_setup(4, 4);
        let mut g = Graph::new(&store);
        let c = g.constant(states(3, 4, 12));
        let u = g.constant(states(1, 4, 13));
        let r = g.constant(states(1, 4, 14));
        assert!(ih.forward(&mut g, c, u, r, &[]).is_none());
        let (p, q) = ih.forward(&mut g, c, u, r, &[1]).unwrap();
        for v in [p, q] {
            let t = g.value(v);
            assert_eq!(t.cols, 6);
            assert!((t.data.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(t.data.iter().all(|&x| x > 0.0));
        }
        // mean of a single positive is that context vector
        let sel = g.gather_rows(c, &[1]);
        let pooled = g.mean_rows(sel, &[(0, 1)]);
        assert_eq!(g.value(pooled).row(0), g.value(c).row(1));
        // same projection, same input: identical distributions, zero divergence
        let a = project(&mut g, &ih.rw, r);
        let b = project(&mut g, &ih.rw, r);
        assert_eq!(g.value(a), g.value(b));
        let kl = g.kl(a, b);
        assert_eq!(g.value(kl).item(), 0.0);
        let _: Vec<f64> = Vec::new();
    }
}
