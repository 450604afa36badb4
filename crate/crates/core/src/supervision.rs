//! Gold training signals derived from (context, incomplete, rewrite) triples:
//! restored words, per-utterance relevance labels and the gold edit grid.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::rewriter::{apply_edits, decode_grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, PartialOrd, Ord)]
pub enum EditType {
    #[default]
    None,
    Insert,
    Replace,
}

impl EditType {
    pub const ALL: [EditType; 3] = [EditType::None, EditType::Insert, EditType::Replace];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> EditType {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditType::None => "NONE",
            EditType::Insert => "INSERT",
            EditType::Replace => "REPLACE",
        }
    }
}

/// `n_context x n_incomplete` edit types, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEditGrid {
    pub n_context: usize,
    pub n_incomplete: usize,
    pub cells: Vec<EditType>,
}

impl GoldEditGrid {
    pub fn none(n_context: usize, n_incomplete: usize) -> Self {
        GoldEditGrid { n_context, n_incomplete, cells: vec![EditType::None; n_context * n_incomplete] }
    }

    pub fn get(&self, i: usize, j: usize) -> EditType {
        self.cells[i * self.n_incomplete + j]
    }

    pub fn set(&mut self, i: usize, j: usize, t: EditType) {
        self.cells[i * self.n_incomplete + j] = t;
    }

    /// Non-NONE cells as `(row, column, type)`.
    pub fn edits(&self) -> Vec<(usize, usize, EditType)> {
        let mut out = Vec::new();
        for i in 0..self.n_context {
            for j in 0..self.n_incomplete {
                let t = self.get(i, j);
                if t != EditType::None {
                    out.push((i, j, t));
                }
            }
        }
        out
    }

    pub fn is_all_none(&self) -> bool {
        self.cells.iter().all(|&c| c == EditType::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignStatus {
    Aligned,
    Unalignable,
}

impl AlignStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignStatus::Aligned => "ALIGNED",
            AlignStatus::Unalignable => "UNALIGNABLE",
        }
    }
}

/// Per-utterance relevance `R` and the positive set `C_P = {i : R_i = 1}`.
/// Negatives are drawn at batch time by the objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceLabels {
    pub r: Vec<bool>,
    pub positives: Vec<usize>,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "am", "do", "does", "did", "have", "has", "had",
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "my", "your", "his", "its",
    "our", "their", "in", "on", "at", "to", "of", "for", "with", "from", "by", "about", "and", "or", "but", "than",
    "other", "there", "this", "that", "what", "who", "how", "why", "when", "where", "which", "any", "else", "not",
];

/// The shipped function-word list used by [`relevance_labels`].
pub fn default_stopwords() -> BTreeSet<String> {
    STOPWORDS.iter().map(|s| s.to_string()).collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

/// Multiset difference `rewrite - incomplete` over word tokens (punctuation
/// is never a restored word), in rewrite order.
pub fn restored_words(incomplete: &[String], rewrite: &[String]) -> Vec<String> {
    let mut pool: Vec<String> = incomplete.iter().map(|t| t.to_lowercase()).collect();
    let mut out = Vec::new();
    for t in rewrite {
        let t = t.to_lowercase();
        if let Some(k) = pool.iter().position(|p| *p == t) {
            pool.swap_remove(k);
        } else if is_word(&t) {
            out.push(t);
        }
    }
    out
}

pub fn relevance_labels(d: &Dialogue, stopwords: &BTreeSet<String>) -> Result<RelevanceLabels> {
    let rewrite = d.rewrite.as_ref().ok_or_else(|| Error::MissingRewrite { id: d.id.clone() })?;
    let content: BTreeSet<String> = restored_words(&d.incomplete.tokens, &rewrite.tokens)
        .into_iter()
        .filter(|w| !stopwords.contains(w))
        .collect();
    let r: Vec<bool> = d.context.iter().map(|u| u.tokens.iter().any(|t| content.contains(&t.to_lowercase()))).collect();
    let positives = r.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| i).collect();
    Ok(RelevanceLabels { r, positives })
}

/// LCS alignment as matched `(incomplete index, rewrite index)` pairs,
/// matching as early as possible.
pub fn lcs_pairs(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[at(i, j)] = if a[i] == b[j] { dp[at(i + 1, j + 1)] + 1 } else { dp[at(i + 1, j)].max(dp[at(i, j + 1)]) };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < n && j < m {
        if a[i] == b[j] && dp[at(i, j)] == dp[at(i + 1, j + 1)] + 1 {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if dp[at(i + 1, j)] >= dp[at(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Longest prefix of `span` found contiguously inside one context utterance.
/// Ties go to the latest utterance, then the leftmost occurrence. Returns the
/// context-token range.
fn longest_context_match(span: &[String], d: &Dialogue) -> Option<(usize, usize)> {
    let ranges = d.context_ranges();
    let mut best: Option<(usize, usize)> = None;
    let mut best_len = 0;
    for (k, u) in d.context.iter().enumerate().rev() {
        for start in 0..u.len() {
            let mut len = 0;
            while len < span.len() && start + len < u.len() && u.tokens[start + len] == span[len] {
                len += 1;
            }
            if len > best_len {
                best_len = len;
                let s = ranges[k].0 + start;
                best = Some((s, s + len));
            }
        }
    }
    best
}

/// Derives the gold edit grid by LCS alignment of incomplete and rewrite and
/// exact matching of each restored span against the context. Grids that do
/// not reproduce the rewrite are reported as unalignable and all-NONE.
pub fn build_gold_edit_grid(d: &Dialogue) -> Result<(GoldEditGrid, AlignStatus)> {
    let rewrite = d.rewrite.as_ref().ok_or_else(|| Error::MissingRewrite { id: d.id.clone() })?;
    let (u, r) = (&d.incomplete.tokens, &rewrite.tokens);
    let (n_c, n_u) = (d.n_context_tokens(), u.len());
    let empty = GoldEditGrid::none(n_c, n_u);
    let fail = || Ok((GoldEditGrid::none(n_c, n_u), AlignStatus::Unalignable));

    let mut pairs = lcs_pairs(u, r);
    pairs.push((n_u, r.len()));
    let mut grid = empty;
    let (mut pu, mut pr) = (0, 0);
    for &(mu, mr) in &pairs {
        let (u_gap, r_gap) = ((pu, mu), (pr, mr));
        pu = mu + 1;
        pr = mr + 1;
        if r_gap.0 == r_gap.1 {
            if u_gap.0 != u_gap.1 {
                // pure deletion is not expressible
                return fail();
            }
            continue;
        }
        let (column, replaces) = match u_gap.1 - u_gap.0 {
            0 => (mu, false),
            1 => (u_gap.0, true),
            _ => return fail(),
        };
        if column >= n_u {
            // suffix insertion has no grid column
            return fail();
        }
        let span = &r[r_gap.0..r_gap.1];
        let mut pieces = Vec::new();
        let mut pos = 0;
        while pos < span.len() {
            let Some((s, e)) = longest_context_match(&span[pos..], d) else { return fail() };
            pieces.push((s, e));
            pos += e - s;
        }
        let last = pieces.len() - 1;
        for (k, &(s, e)) in pieces.iter().enumerate() {
            let t = if replaces && k == last { EditType::Replace } else { EditType::Insert };
            for i in s..e {
                if grid.get(i, column) != EditType::None {
                    return fail();
                }
                grid.set(i, column, t);
            }
        }
    }

    let spans = decode_grid(&GridView::Gold(&grid), &d.context_owners());
    let rebuilt = apply_edits(&d.incomplete.tokens, &d.context_tokens(), &spans);
    if rebuilt.tokens != *r {
        return fail();
    }
    Ok((grid, AlignStatus::Aligned))
}

/// Either a gold grid or a predicted probability grid, for decoding.
pub enum GridView<'a> {
    Gold(&'a GoldEditGrid),
    /// `n_context x n_incomplete` cells of `[none, insert, replace]`, row-major.
    Probs { n_context: usize, n_incomplete: usize, cells: &'a [[f64; 3]] },
}

impl GridView<'_> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            GridView::Gold(g) => (g.n_context, g.n_incomplete),
            GridView::Probs { n_context, n_incomplete, .. } => (*n_context, *n_incomplete),
        }
    }

    /// Argmax edit type; ties resolve to the lower index (NONE first).
    pub fn argmax(&self, i: usize, j: usize) -> EditType {
        match self {
            GridView::Gold(g) => g.get(i, j),
            GridView::Probs { n_incomplete, cells, .. } => {
                let c = cells[i * n_incomplete + j];
                let mut best = 0;
                for k in 1..3 {
                    if c[k] > c[best] {
                        best = k;
                    }
                }
                EditType::from_index(best)
            }
        }
    }
}
