//! Training losses, their weighted combination and negative sampling.
//!
//! The scalar functions here operate on detached values; the model builds
//! the same quantities as graph nodes for training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::PROB_FLOOR;
use crate::error::{Error, Result};
use crate::heads::{IntentionPair, PredictedEditGrid, RelevanceVector};
use crate::supervision::GoldEditGrid;

/// `alpha_1..3`: weights of selection, matching and intention losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sel: f64,
    pub mat: f64,
    pub int: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sel: 0.5, mat: 0.5, int: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for w in [self.sel, self.mat, self.int] {
            if !(w >= 0.0) {
                return Err(Error::NegativeWeight(w));
            }
        }
        Ok(())
    }
}

/// Per-component losses with the number of cells / utterances / pairs /
/// examples behind each. A skipped component is 0 with count 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_edit: f64,
    pub l_sel: f64,
    pub l_mat: f64,
    pub l_int: f64,
    pub l_final: f64,
    pub n_cells: usize,
    pub n_utterances: usize,
    pub n_pairs: usize,
    pub n_intent: usize,
}

/// Weighted NLL of the gold classes under the merged grid, probabilities
/// floored at `1e-8`.
pub fn loss_edit(p: &PredictedEditGrid, gold: &GoldEditGrid, class_weights: [f64; 3]) -> Result<f64> {
    if (p.n_context, p.n_incomplete) != (gold.n_context, gold.n_incomplete) {
        return Err(Error::DimensionMismatch(format!(
            "grid {}x{} vs gold {}x{}",
            p.n_context, p.n_incomplete, gold.n_context, gold.n_incomplete
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.n_context {
        for j in 0..p.n_incomplete {
            let k = gold.get(i, j).index();
            let w = class_weights[k];
            num += w * -libm::log(p.get(i, j)[k].max(PROB_FLOOR));
            den += w;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

pub fn bce(p: f64, y: f64) -> f64 {
    -(y * libm::log(p.max(PROB_FLOOR)) + (1.0 - y) * libm::log((1.0 - p).max(PROB_FLOOR)))
}

/// Mean binary cross-entropy of relevance against labels.
pub fn loss_sel(r: &RelevanceVector, labels: &[bool]) -> Result<f64> {
    if r.0.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} relevances for {} labels", r.0.len(), labels.len())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = r.0.iter().zip(labels).map(|(&p, &y)| bce(p, if y { 1.0 } else { 0.0 })).sum();
    Ok(s / labels.len() as f64)
}

/// Mean binary cross-entropy over (score, label) pairs.
pub fn loss_mat(scores: &[f64], labels: &[bool]) -> Result<f64> {
    loss_sel(&RelevanceVector(scores.to_vec()), labels)
}

/// `KL(p_ctx || p_rw)`.
pub fn loss_int(pair: &IntentionPair) -> f64 {
    pair.p_ctx.iter().zip(&pair.p_rw).map(|(&p, &q)| p * (libm::log(p) - libm::log(q))).sum()
}

/// Assembles the breakdown; `L_final` is the exact weighted sum.
pub fn combine(parts: LossBreakdown, w: LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    Ok(LossBreakdown { l_final: parts.l_edit + w.sel * parts.l_sel + w.mat * parts.l_mat + w.int * parts.l_int, ..parts })
}

/// A context utterance of some batch example, used as a match candidate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct UtteranceRef {
    pub example_id: String,
    pub utterance: usize,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one example's negative draw: depends on the run seed, the step
/// and the example id, never on batch position.
pub fn negative_seed(seed: u64, step: u64, example_id: &str) -> u64 {
    let h = fnv1a(seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    let h = fnv1a(step.to_le_bytes(), h);
    fnv1a(example_id.bytes(), h)
}

/// Up to `k` distinct utterances drawn uniformly from the other examples'
/// contexts. `batch` lists `(example id, number of context utterances)`.
pub fn sample_negatives(batch: &[(&str, usize)], target: usize, k: usize, seed: u64, step: u64) -> Vec<UtteranceRef> {
    let me = batch[target].0;
    let mut pool: Vec<UtteranceRef> = batch
        .iter()
        .filter(|(id, _)| *id != me)
        .flat_map(|&(id, n)| (0..n).map(move |u| UtteranceRef { example_id: id.into(), utterance: u }))
        .collect();
    pool.sort();
    pool.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(negative_seed(seed, step, me));
    let take = k.min(pool.len());
    for i in 0..take {
        let j = i + (rng.next_u64() % (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::EditType;
    use alloc::vec;
    use core::f64::consts::LN_2;

    fn grid(n_c: usize, n_u: usize, cells: Vec<[f64; 3]>) -> PredictedEditGrid {
        PredictedEditGrid { n_context: n_c, n_incomplete: n_u, cells, merged: true }
    }

    #[test]
    fn edit_loss_examples() {
        let mut gold = GoldEditGrid::none(2, 2);
        gold.set(0, 1, EditType::Insert);
        gold.set(1, 0, EditType::Replace);
        let onehot = grid(2, 2, vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert_eq!(loss_edit(&onehot, &gold, [1.0, 5.0, 5.0]).unwrap(), 0.0);
        for (n_c, n_u) in [(1, 1), (3, 2), (7, 5)] {
            let u = grid(n_c, n_u, vec![[1.0 / 3.0; 3]; n_c * n_u]);
            let l = loss_edit(&u, &GoldEditGrid::none(n_c, n_u), [1.0; 3]).unwrap();
            assert!((l - libm::log(3.0)).abs() < 1e-12);
        }
        let mut g21 = GoldEditGrid::none(2, 1);
        g21.set(1, 0, EditType::Insert);
        let p = grid(2, 1, vec![[0.5, 0.25, 0.25], [0.5, 0.25, 0.25]]);
        let l = loss_edit(&p, &g21, [1.0; 3]).unwrap();
        assert!((l - 1.0397).abs() < 1e-4);
        assert!((l - (LN_2 + libm::log(4.0)) / 2.0).abs() < 1e-12);
        assert!(loss_edit(&p, &GoldEditGrid::none(1, 2), [1.0; 3]).is_err());
    }

    #[test]
    fn selection_loss_examples() {
        assert!(loss_sel(&RelevanceVector(vec![1.0, 0.0]), &[true, false]).unwrap() < 1e-7);
        let half = loss_sel(&RelevanceVector(vec![0.5; 4]), &[true, false, true, true]).unwrap();
        assert!((half - LN_2).abs() < 1e-12);
        let l = loss_sel(&RelevanceVector(vec![0.9, 0.2]), &[true, false]).unwrap();
        assert!((l - 0.16425).abs() < 1e-5);
        assert!(loss_sel(&RelevanceVector(vec![0.9]), &[true, false]).is_err());
        assert!(loss_mat(&[1.0, 0.0, 0.0], &[true, false, false]).unwrap() < 1e-7);
    }

    #[test]
    fn intention_loss_examples() {
        let p = IntentionPair { p_ctx: vec![0.3, 0.7], p_rw: vec![0.3, 0.7] };
        assert_eq!(loss_int(&p), 0.0);
        let eps = 1e-8;
        let p = IntentionPair { p_ctx: vec![1.0 - eps, eps], p_rw: vec![0.5, 0.5] };
        assert!((loss_int(&p) - LN_2).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dist = |k: usize| {
            let v: Vec<f64> = (0..k).map(|_| (rng.next_u64() % 1000 + 1) as f64).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        for t in 0..1000 {
            let k = 2 + t % 6;
            let pair = IntentionPair { p_ctx: dist(k), p_rw: dist(k) };
            assert!(loss_int(&pair) >= -1e-15);
        }
    }

    #[test]
    fn combine_examples() {
        let parts = LossBreakdown { l_edit: 1.0, l_sel: 0.5, l_mat: 0.2, l_int: 0.1, ..Default::default() };
        let all = combine(parts, LossWeights { sel: 1.0, mat: 1.0, int: 1.0 }).unwrap();
        assert!((all.l_final - 1.8).abs() < 1e-12);
        let none = combine(parts, LossWeights { sel: 0.0, mat: 0.0, int: 0.0 }).unwrap();
        assert_eq!(none.l_final, none.l_edit);
        assert_eq!(combine(LossBreakdown::default(), LossWeights::default()).unwrap().l_final, 0.0);
        assert!(matches!(combine(parts, LossWeights { sel: -0.1, mat: 0.0, int: 0.0 }), Err(Error::NegativeWeight(_))));
    }

    #[test]
    fn negatives_are_seeded_and_order_free() {
        let batch = [("a", 3), ("b", 2), ("c", 4), ("d", 1)];
        let x = sample_negatives(&batch, 0, 3, 9, 5);
        assert_eq!(x, sample_negatives(&batch, 0, 3, 9, 5));
        assert_eq!(x.len(), 3);
        assert!(x.iter().all(|r| r.example_id != "a"));
        let mut uniq = x.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);
        let shuffled = [("c", 4), ("d", 1), ("a", 3), ("b", 2)];
        assert_eq!(sample_negatives(&shuffled, 2, 3, 9, 5), x);
        assert!(sample_negatives(&[("a", 3)], 0, 3, 9, 5).is_empty());
        assert_eq!(sample_negatives(&[("a", 3), ("b", 2)], 0, 3, 9, 5).len(), 2);
    }
}
