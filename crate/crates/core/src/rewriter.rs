//! Edit-grid decoding and deterministic application of edits to the
//! incomplete utterance.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::supervision::{EditType, GoldEditGrid, GridView};

/// A run of context tokens `context.0..context.1` (one utterance) inserted
/// before, or replacing, incomplete token `column`. `column == n_incomplete`
/// appends after the last token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpan {
    pub kind: EditType,
    pub context: (usize, usize),
    pub column: usize,
    pub utterance: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewritten {
    pub tokens: Vec<String>,
    /// REPLACE spans dropped because another REPLACE won the same column.
    pub conflicts: usize,
}

/// Argmax per cell, then maximal runs of consecutive context rows inside one
/// utterance that share a type and a column. Ordered by (column, start).
pub fn decode_grid(grid: &GridView<'_>, owners: &[usize]) -> Vec<EditSpan> {
    let (n_c, n_u) = grid.dims();
    debug_assert_eq!(owners.len(), n_c);
    let mut spans = Vec::new();
    for j in 0..n_u {
        let mut i = 0;
        while i < n_c {
            let t = grid.argmax(i, j);
            if t == EditType::None {
                i += 1;
                continue;
            }
            let start = i;
            while i + 1 < n_c && owners[i + 1] == owners[start] && grid.argmax(i + 1, j) == t {
                i += 1;
            }
            spans.push(EditSpan { kind: t, context: (start, i + 1), column: j, utterance: owners[start] });
            i += 1;
        }
    }
    spans
}

/// Column by column: every INSERT span for the column (context order), then
/// the winning REPLACE span in place of the token, else the token itself.
/// The winning REPLACE comes from the most recent utterance, earliest start.
pub fn apply_edits(incomplete: &[String], context: &[String], spans: &[EditSpan]) -> Rewritten {
    let n_u = incomplete.len();
    let mut out = Vec::with_capacity(n_u);
    let mut conflicts = 0;
    for j in 0..=n_u {
        let mut inserts: Vec<&EditSpan> = spans.iter().filter(|s| s.column == j && s.kind == EditType::Insert).collect();
        inserts.sort_by_key(|s| s.context);
        for s in inserts {
            out.extend_from_slice(&context[s.context.0..s.context.1]);
        }
        let replaces: Vec<&EditSpan> = spans.iter().filter(|s| s.column == j && s.kind == EditType::Replace).collect();
        let winner = replaces.iter().min_by_key(|s| (core::cmp::Reverse(s.utterance), s.context.0));
        match winner {
            Some(s) if j < n_u => {
                conflicts += replaces.len() - 1;
                out.extend_from_slice(&context[s.context.0..s.context.1]);
            }
            _ => {
                if j < n_u {
                    out.push(incomplete[j].clone());
                }
            }
        }
    }
    Rewritten { tokens: out, conflicts }
}

/// Paints spans onto an all-NONE grid.
pub fn spans_to_grid(spans: &[EditSpan], n_context: usize, n_incomplete: usize) -> GoldEditGrid {
    let mut g = GoldEditGrid::none(n_context, n_incomplete);
    for s in spans {
        for i in s.context.0..s.context.1 {
            g.set(i, s.column, s.kind);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use alloc::vec;
    use proptest::prelude::*;

    fn span(kind: EditType, s: usize, e: usize, column: usize, utterance: usize) -> EditSpan {
        EditSpan { kind, context: (s, e), column, utterance }
    }

    #[test]
    fn all_none_decodes_to_nothing() {
        let g = GoldEditGrid::none(4, 3);
        assert!(decode_grid(&GridView::Gold(&g), &[0, 0, 1, 1]).is_empty());
    }

    #[test]
    fn adjacent_rows_group_into_one_span() {
        let mut g = GoldEditGrid::none(8, 3);
        g.set(4, 2, EditType::Insert);
        g.set(5, 2, EditType::Insert);
        let owners = [0; 8];
        assert_eq!(decode_grid(&GridView::Gold(&g), &owners), vec![span(EditType::Insert, 4, 6, 2, 0)]);
        g.set(5, 2, EditType::None);
        g.set(6, 2, EditType::Insert);
        assert_eq!(
            decode_grid(&GridView::Gold(&g), &owners),
            vec![span(EditType::Insert, 4, 5, 2, 0), span(EditType::Insert, 6, 7, 2, 0)]
        );
    }

    #[test]
    fn runs_never_cross_utterances() {
        let mut g = GoldEditGrid::none(4, 1);
        g.set(1, 0, EditType::Insert);
        g.set(2, 0, EditType::Insert);
        let spans = decode_grid(&GridView::Gold(&g), &[0, 0, 1, 1]);
        assert_eq!(spans, vec![span(EditType::Insert, 1, 2, 0, 0), span(EditType::Insert, 2, 3, 0, 1)]);
    }

    #[test]
    fn probability_grid_argmax() {
        let cells = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7], [0.4, 0.4, 0.2]];
        let v = GridView::Probs { n_context: 2, n_incomplete: 2, cells: &cells };
        let spans = decode_grid(&v, &[0, 0]);
        assert_eq!(spans, vec![span(EditType::Replace, 1, 2, 0, 0), span(EditType::Insert, 0, 1, 1, 0)]);
    }

    #[test]
    fn apply_examples() {
        let ctx = tokenize("i like jazz");
        let inc = tokenize("why ?");
        assert_eq!(apply_edits(&inc, &ctx, &[]).tokens, inc);
        let out = apply_edits(&inc, &ctx, &[span(EditType::Insert, 2, 3, 1, 0)]);
        assert_eq!(out.tokens, tokenize("why jazz ?"));
        let ctx = tokenize("tom is here");
        let out = apply_edits(&tokenize("he left"), &ctx, &[span(EditType::Replace, 0, 1, 0, 0)]);
        assert_eq!(out.tokens, tokenize("tom left"));
        assert_eq!(out.conflicts, 0);
    }

    #[test]
    fn insert_precedes_replace_and_end_column_appends() {
        let ctx = tokenize("a b c d");
        let inc = tokenize("x y");
        let spans = [
            span(EditType::Replace, 0, 1, 0, 0),
            span(EditType::Insert, 1, 3, 0, 0),
            span(EditType::Insert, 3, 4, 2, 0),
        ];
        assert_eq!(apply_edits(&inc, &ctx, &spans).tokens, tokenize("b c a y d"));
    }

    #[test]
    fn replace_conflicts_prefer_recent_utterance() {
        let ctx = tokenize("tom ann bob");
        let inc = tokenize("he left");
        let spans = [
            span(EditType::Replace, 0, 1, 0, 0),
            span(EditType::Replace, 2, 3, 0, 2),
            span(EditType::Replace, 1, 2, 0, 1),
        ];
        let out = apply_edits(&inc, &ctx, &spans);
        assert_eq!(out.tokens, tokenize("bob left"));
        assert_eq!(out.conflicts, 2);
    }

    /// Conflict-free span lists: random INSERT cells plus at most one
    /// REPLACE run per column.
    fn arb_spans() -> impl Strategy<Value = (usize, usize, Vec<usize>, Vec<EditSpan>)> {
        (1usize..4, 1usize..4, 1usize..5)
            .prop_flat_map(|(n_utts, utt_len, n_u)| {
                let n_c = n_utts * utt_len;
                let inserts = proptest::collection::vec(proptest::bool::weighted(0.3), n_c * n_u);
                let replaces = proptest::collection::vec(
                    proptest::option::of((0..n_utts, 0..utt_len, 1..=utt_len)),
                    n_u,
                );
                (Just(utt_len), Just(n_c), Just(n_u), inserts, replaces)
            })
            .prop_map(|(utt_len, n_c, n_u, inserts, replaces)| {
                let owners: Vec<usize> = (0..n_c).map(|i| i / utt_len).collect();
                let mut g = GoldEditGrid::none(n_c, n_u);
                for i in 0..n_c {
                    for j in 0..n_u {
                        if inserts[i * n_u + j] {
                            g.set(i, j, EditType::Insert);
                        }
                    }
                }
                for (j, r) in replaces.iter().enumerate() {
                    if let Some((u, s, l)) = *r {
                        let start = u * utt_len + s;
                        let end = (start + l).min((u + 1) * utt_len);
                        for i in start..end {
                            g.set(i, j, EditType::Replace);
                        }
                    }
                }
                let spans = decode_grid(&GridView::Gold(&g), &owners);
                (n_c, n_u, owners, spans)
            })
    }

    proptest! {
        #[test]
        fn decode_inverts_painting((n_c, n_u, owners, spans) in arb_spans()) {
            let g = spans_to_grid(&spans, n_c, n_u);
            prop_assert_eq!(decode_grid(&GridView::Gold(&g), &owners), spans);
        }

        #[test]
        fn output_length_accounts_for_spans((n_c, n_u, _owners, spans) in arb_spans()) {
            let ctx: Vec<String> = (0..n_c).map(|i| alloc::format!("c{i}")).collect();
            let inc: Vec<String> = (0..n_u).map(|j| alloc::format!("u{j}")).collect();
            let out = apply_edits(&inc, &ctx, &spans);
            let mut want = n_u as isize;
            for s in &spans {
                let len = (s.context.1 - s.context.0) as isize;
                want += if s.kind == EditType::Insert { len } else { len - 1 };
            }
            prop_assert_eq!(out.conflicts, 0);
            prop_assert_eq!(out.tokens.len() as isize, want);
        }
    }
}
