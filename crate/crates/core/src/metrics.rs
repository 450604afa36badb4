//! BLEU, ROUGE and restoration F-scores over token sequences.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Counts<'a> = BTreeMap<&'a [alloc::string::String], usize>;

fn ngrams(tokens: &[alloc::string::String], n: usize) -> Counts<'_> {
    let mut m = Counts::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(pred: &Counts<'_>, reference: &Counts<'_>) -> usize {
    pred.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

fn total(c: &Counts<'_>) -> usize {
    c.values().sum()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// One scored example: prediction, the incomplete utterance it rewrote and
/// the gold rewrite.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub pred: &'a [alloc::string::String],
    pub incomplete: &'a [alloc::string::String],
    pub reference: &'a [alloc::string::String],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BleuMode {
    Corpus,
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuOptions {
    pub mode: BleuMode,
    /// Add-one smoothing on orders with zero clipped matches.
    pub smoothing: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions { mode: BleuMode::Corpus, smoothing: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bleu {
    pub score: f64,
    /// Number of (order, unit) precisions that were smoothed.
    pub smoothed: usize,
}

fn bleu_from_stats(matches: &[usize], totals: &[usize], pred_len: usize, ref_len: usize, smoothing: bool) -> Bleu {
    if pred_len == 0 {
        return Bleu { score: 0.0, smoothed: 0 };
    }
    let mut smoothed = 0;
    let mut log_sum = 0.0;
    for (&m, &t) in matches.iter().zip(totals) {
        let p = if m == 0 {
            if !smoothing {
                return Bleu { score: 0.0, smoothed: 0 };
            }
            smoothed += 1;
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
        log_sum += libm::log(p);
    }
    let bp = if pred_len > ref_len { 1.0 } else { libm::exp(1.0 - ref_len as f64 / pred_len as f64) };
    Bleu { score: bp * libm::exp(log_sum / matches.len() as f64), smoothed }
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped counts and a
/// corpus-level brevity penalty.
pub fn corpus_bleu(pairs: &[(&[alloc::string::String], &[alloc::string::String])], n: usize, smoothing: bool) -> Result<Bleu> {
    if pairs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if !(1..=4).contains(&n) {
        return Err(Error::UnsupportedOrder(n));
    }
    let mut matches = alloc::vec![0usize; n];
    let mut totals = alloc::vec![0usize; n];
    let (mut c, mut r) = (0, 0);
    for (pred, reference) in pairs {
        c += pred.len();
        r += reference.len();
        for k in 1..=n {
            let pg = ngrams(pred, k);
            matches[k - 1] += clipped_overlap(&pg, &ngrams(reference, k));
            totals[k - 1] += total(&pg);
        }
    }
    Ok(bleu_from_stats(&matches, &totals, c, r, smoothing))
}

/// BLEU of a single pair.
pub fn sentence_bleu(pred: &[alloc::string::String], reference: &[alloc::string::String], n: usize, smoothing: bool) -> Result<Bleu> {
    corpus_bleu(&[(pred, reference)], n, smoothing)
}

/// F1 of clipped n-gram overlap. Two sequences without any n-grams of this
/// order score 1; otherwise an empty side scores 0.
pub fn rouge_n(pred: &[alloc::string::String], reference: &[alloc::string::String], n: usize) -> f64 {
    let (pg, rg) = (ngrams(pred, n), ngrams(reference, n));
    let (tp, tr) = (total(&pg), total(&rg));
    if tp == 0 && tr == 0 {
        return if pred.is_empty() && !reference.is_empty() { 0.0 } else { 1.0 };
    }
    if tp == 0 || tr == 0 {
        return 0.0;
    }
    let o = clipped_overlap(&pg, &rg) as f64;
    f1(o / tp as f64, o / tr as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 from the longest common subsequence.
pub fn rouge_l(pred: &[alloc::string::String], reference: &[alloc::string::String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return if pred.is_empty() && reference.is_empty() { 1.0 } else { 0.0 };
    }
    let l = lcs_len(pred, reference) as f64;
    f1(l / pred.len() as f64, l / reference.len() as f64)
}

/// Word types whose count in `seq` exceeds their count in `incomplete`.
fn restored_types<'a>(seq: &'a [alloc::string::String], incomplete: &[alloc::string::String]) -> Vec<&'a str> {
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for t in seq {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    for t in incomplete {
        if let Some(c) = counts.get_mut(t.as_str()) {
            *c -= 1;
        }
    }
    counts.into_iter().filter(|&(_, c)| c > 0).map(|(t, _)| t).collect()
}

fn restored_ngrams<'a>(seq: &'a [alloc::string::String], incomplete: &[alloc::string::String], n: usize) -> Counts<'a> {
    let restored = restored_types(seq, incomplete);
    let mut g = ngrams(seq, n);
    g.retain(|gram, _| gram.iter().any(|t| restored.binary_search(&t.as_str()).is_ok()));
    g
}

/// Restoration F-score of order `n`: F1 of clipped overlap between the
/// prediction's and the reference's n-grams that contain a restored word
/// (one whose count exceeds its count in the incomplete utterance).
/// `None` when the reference restores nothing.
pub fn restoration_fscore(pred: &[alloc::string::String], incomplete: &[alloc::string::String], reference: &[alloc::string::String], n: usize) -> Option<f64> {
    let rg = restored_ngrams(reference, incomplete, n);
    let tr = total(&rg);
    if tr == 0 {
        return None;
    }
    let pg = restored_ngrams(pred, incomplete, n);
    let tp = total(&pg);
    if tp == 0 {
        return Some(0.0);
    }
    let o = clipped_overlap(&pg, &rg) as f64;
    Some(f1(o / tp as f64, o / tr as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub exact_match: f64,
    pub n_examples: usize,
    /// Examples whose reference restores at least one word (F-score support).
    pub n_restoration: usize,
    pub bleu_mode: BleuMode,
    pub bleu_smoothing: bool,
    /// Smoothed precisions across BLEU-1 and BLEU-2.
    pub bleu_smoothed_orders: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate(items: &[Scored<'_>], options: BleuOptions) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let pairs: Vec<_> = items.iter().map(|s| (s.pred, s.reference)).collect();
    let (bleu1, bleu2, smoothed) = match options.mode {
        BleuMode::Corpus => {
            let (b1, b2) = (corpus_bleu(&pairs, 1, options.smoothing)?, corpus_bleu(&pairs, 2, options.smoothing)?);
            (b1.score, b2.score, b1.smoothed + b2.smoothed)
        }
        BleuMode::Sentence => {
            let mut sm = 0;
            let mut acc = [0.0; 2];
            for &(p, r) in &pairs {
                for (k, a) in acc.iter_mut().enumerate() {
                    let b = sentence_bleu(p, r, k + 1, options.smoothing)?;
                    sm += b.smoothed;
                    *a += b.score;
                }
            }
            (acc[0] / pairs.len() as f64, acc[1] / pairs.len() as f64, sm)
        }
    };
    let mut fs = [0.0; 3];
    let mut n_rest = 0;
    for s in items {
        if let Some(f) = restoration_fscore(s.pred, s.incomplete, s.reference, 1) {
            n_rest += 1;
            fs[0] += f;
            for (k, slot) in fs.iter_mut().enumerate().skip(1) {
                *slot += restoration_fscore(s.pred, s.incomplete, s.reference, k + 1).unwrap_or(0.0);
            }
        }
    }
    let fdiv = if n_rest == 0 { 1.0 } else { n_rest as f64 };
    Ok(MetricsReport {
        bleu1,
        bleu2,
        rouge1: mean(items.iter().map(|s| rouge_n(s.pred, s.reference, 1))),
        rouge2: mean(items.iter().map(|s| rouge_n(s.pred, s.reference, 2))),
        rouge_l: mean(items.iter().map(|s| rouge_l(s.pred, s.reference))),
        f1: fs[0] / fdiv,
        f2: fs[1] / fdiv,
        f3: fs[2] / fdiv,
        exact_match: mean(items.iter().map(|s| if s.pred == s.reference { 1.0 } else { 0.0 })),
        n_examples: items.len(),
        n_restoration: n_rest,
        bleu_mode: options.mode,
        bleu_smoothing: options.smoothing,
        bleu_smoothed_orders: smoothed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use alloc::string::String;
    use alloc::vec;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    // ---- brute-force oracle: flat n-gram lists and subsequence enumeration ----

    fn o_grams(s: &[String], n: usize) -> Vec<Vec<String>> {
        let mut v = Vec::new();
        let mut i = 0;
        while i + n <= s.len() {
            v.push(s[i..i + n].to_vec());
            i += 1;
        }
        v
    }

    fn o_count(list: &[Vec<String>], g: &[String]) -> usize {
        list.iter().filter(|x| x.as_slice() == g).count()
    }

    fn o_overlap(p: &[Vec<String>], r: &[Vec<String>]) -> usize {
        let mut seen: Vec<&Vec<String>> = Vec::new();
        let mut o = 0;
        for g in p {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            o += o_count(p, g).min(o_count(r, g));
        }
        o
    }

    fn o_f(o: usize, tp: usize, tr: usize) -> f64 {
        if o == 0 {
            return 0.0;
        }
        let (p, r) = (o as f64 / tp as f64, o as f64 / tr as f64);
        2.0 * p * r / (p + r)
    }

    fn o_rouge_n(p: &[String], r: &[String], n: usize) -> f64 {
        let (pg, rg) = (o_grams(p, n), o_grams(r, n));
        if pg.is_empty() && rg.is_empty() {
            return if p.is_empty() && !r.is_empty() { 0.0 } else { 1.0 };
        }
        if pg.is_empty() || rg.is_empty() {
            return 0.0;
        }
        o_f(o_overlap(&pg, &rg), pg.len(), rg.len())
    }

    fn is_subseq(a: &[String], b: &[String]) -> bool {
        let mut it = b.iter();
        a.iter().all(|x| it.any(|y| y == x))
    }

    fn o_lcs(p: &[String], r: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << p.len()) {
            let sub: Vec<String> = (0..p.len()).filter(|i| mask >> i & 1 == 1).map(|i| p[i].clone()).collect();
            if sub.len() > best && is_subseq(&sub, r) {
                best = sub.len();
            }
        }
        best
    }

    fn o_rouge_l(p: &[String], r: &[String]) -> f64 {
        if p.is_empty() || r.is_empty() {
            return if p.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
        }
        let l = o_lcs(p, r);
        o_f(l, p.len(), r.len())
    }

    fn o_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
        let c: usize = pairs.iter().map(|p| p.0.len()).sum();
        let r: usize = pairs.iter().map(|p| p.1.len()).sum();
        if c == 0 {
            return 0.0;
        }
        let mut prod = 1.0f64;
        for k in 1..=n {
            let m: usize = pairs.iter().map(|(p, r)| o_overlap(&o_grams(p, k), &o_grams(r, k))).sum();
            let t: usize = pairs.iter().map(|(p, _)| o_grams(p, k).len()).sum();
            let pk = if m == 0 { 1.0 / (t as f64 + 1.0) } else { m as f64 / t as f64 };
            prod *= pk;
        }
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        bp * prod.powf(1.0 / n as f64)
    }

    fn o_restoration(p: &[String], inc: &[String], r: &[String], n: usize) -> Option<f64> {
        let restored = |s: &[String]| -> Vec<String> {
            let mut out: Vec<String> = Vec::new();
            for t in s {
                let cs = s.iter().filter(|x| *x == t).count();
                let ci = inc.iter().filter(|x| *x == t).count();
                if cs > ci && !out.contains(t) {
                    out.push(t.clone());
                }
            }
            out
        };
        let keep = |s: &[String]| -> Vec<Vec<String>> {
            let rs = restored(s);
            o_grams(s, n).into_iter().filter(|g| g.iter().any(|t| rs.contains(t))).collect()
        };
        let (rg, pg) = (keep(r), keep(p));
        if rg.is_empty() {
            return None;
        }
        if pg.is_empty() {
            return Some(0.0);
        }
        Some(o_f(o_overlap(&pg, &rg), pg.len(), rg.len()))
    }

    fn random_seq(rng: &mut ChaCha8Rng, max: u32) -> Vec<String> {
        let len = rng.next_u32() % (max + 1);
        (0..len).map(|_| alloc::format!("w{}", rng.next_u32() % 5)).collect()
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut pairs = Vec::new();
        for _ in 0..100 {
            let inc = random_seq(&mut rng, 4);
            let mut r = random_seq(&mut rng, 8);
            if r.is_empty() {
                r.push("w0".into());
            }
            let p = random_seq(&mut rng, 9);
            for n in 1..=2 {
                assert!((rouge_n(&p, &r, n) - o_rouge_n(&p, &r, n)).abs() < 1e-9);
                let sb = sentence_bleu(&p, &r, n, true).unwrap().score;
                assert!((sb - o_bleu(&[(p.clone(), r.clone())], n)).abs() < 1e-9);
            }
            assert!((rouge_l(&p, &r) - o_rouge_l(&p, &r)).abs() < 1e-9);
            for n in 1..=3 {
                let (a, b) = (restoration_fscore(&p, &inc, &r, n), o_restoration(&p, &inc, &r, n));
                assert_eq!(a.is_some(), b.is_some());
                if let (Some(a), Some(b)) = (a, b) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
            pairs.push((p, r));
        }
        let refs: Vec<(&[String], &[String])> = pairs.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
        for n in 1..=2 {
            assert!((corpus_bleu(&refs, n, true).unwrap().score - o_bleu(&pairs, n)).abs() < 1e-9);
        }
    }

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn hand_examples() {
        let b = sentence_bleu(&t("a b c d"), &t("a b e d"), 1, false).unwrap();
        assert_eq!(b.score, 0.75);
        assert_eq!(rouge_l(&t("a c"), &t("a b c")), 0.8);
        assert_eq!(restoration_fscore(&t("why jazz ?"), &t("why ?"), &t("why jazz ?"), 2), Some(1.0));
        assert_eq!(restoration_fscore(&t("why ?"), &t("why ?"), &t("why philosophy ?"), 1), Some(0.0));
        assert_eq!(rouge_n(&[], &t("a b"), 1), 0.0);
        assert_eq!(rouge_l(&[], &t("a b")), 0.0);
        assert_eq!(sentence_bleu(&t("x y"), &t("a b"), 1, false).unwrap().score, 0.0);
        assert!(sentence_bleu(&t("x y"), &t("a b"), 1, true).unwrap().smoothed == 1);
        assert!(corpus_bleu(&[], 1, true).is_err());
        assert!(corpus_bleu(&[(&t("a")[..], &t("a")[..])], 7, true).is_err());
    }

    #[test]
    fn identical_sequences_score_one() {
        for s in ["a", "a b", "why do you like jazz ?", "a a a b"] {
            let x = t(s);
            for n in 1..=2 {
                assert_eq!(rouge_n(&x, &x, n), 1.0);
                assert!((sentence_bleu(&x, &x, n, true).unwrap().score - 1.0).abs() < 1e-12);
            }
            assert_eq!(rouge_l(&x, &x), 1.0);
        }
        let x = t("why jazz ?");
        for n in 1..=3 {
            assert_eq!(restoration_fscore(&x, &t("why ?"), &x, n), Some(1.0));
        }
        assert_eq!(restoration_fscore(&x, &x, &x, 1), None);
    }

    #[test]
    fn removing_a_match_never_raises_rouge1() {
        // [a, a] vs [a]: dropping the clipped surplus raises the score
        assert!(rouge_n(&t("a"), &t("a"), 1) > rouge_n(&t("a a"), &t("a"), 1));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = random_seq(&mut rng, 8);
            let r = random_seq(&mut rng, 8);
            let base = rouge_n(&p, &r, 1);
            for i in 0..p.len() {
                // a token is a match when none of its copies is clipped away
                let (cp, cr) = (p.iter().filter(|x| **x == p[i]).count(), r.iter().filter(|x| **x == p[i]).count());
                if cp <= cr {
                    let mut q = p.clone();
                    q.remove(i);
                    assert!(rouge_n(&q, &r, 1) <= base + 1e-12);
                }
            }
        }
    }

    #[test]
    fn report_is_bounded() {
        let data = [
            (t("why do you like jazz ?"), t("why ?"), t("why do you like jazz ?")),
            (t("he left"), t("he left"), t("tom left")),
            (t("ok"), t("ok"), t("ok")),
        ];
        let items: Vec<Scored<'_>> = data.iter().map(|(p, i, r)| Scored { pred: p, incomplete: i, reference: r }).collect();
        for mode in [BleuMode::Corpus, BleuMode::Sentence] {
            let rep = evaluate(&items, BleuOptions { mode, smoothing: true }).unwrap();
            for v in [rep.bleu1, rep.bleu2, rep.rouge1, rep.rouge2, rep.rouge_l, rep.f1, rep.f2, rep.f3, rep.exact_match] {
                assert!((0.0..=1.0).contains(&v), "{v}");
            }
            assert_eq!(rep.n_examples, 3);
            assert_eq!(rep.n_restoration, 2);
            assert_eq!(rep.f1, 0.5);
            assert!((rep.exact_match - 2.0 / 3.0).abs() < 1e-12);
        }
        assert!(evaluate(&[], BleuOptions::default()).is_err());
        let _ = vec![0u8];
    }
}
