//! End-to-end use of the public API: supervision, training, rewriting and
//! scoring on the synthetic corpus.

use iur_core::corpus::make_synthetic_corpus;
use iur_core::encoder::EncoderConfig;
use iur_core::metrics::{evaluate, BleuOptions, Scored};
use iur_core::model::prepare;
use iur_core::params::{Adam, AdamConfig};
use iur_core::rewriter::{apply_edits, decode_grid, spans_to_grid};
use iur_core::supervision::{build_gold_edit_grid, AlignStatus, GridView};
use iur_core::train::{batch_indices, train_step};
use iur_core::{Dialogue, Model, RunConfig, Vocab};
use proptest::prelude::*;

fn small_config() -> RunConfig {
    RunConfig {
        encoder: EncoderConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_len: 128, dropout: 0.0, seed: 5 },
        unet_channels: 8,
        d_int: 6,
        batch_size: 4,
        seed: 5,
        ..RunConfig::default()
    }
}

#[test]
fn gold_grids_reproduce_rewrites() {
    let data = make_synthetic_corpus(21, 300);
    let mut aligned = 0;
    for d in &data {
        let (grid, status) = build_gold_edit_grid(d).unwrap();
        if status != AlignStatus::Aligned {
            assert!(grid.is_all_none());
            continue;
        }
        aligned += 1;
        let spans = decode_grid(&GridView::Gold(&grid), &d.context_owners());
        assert_eq!(spans_to_grid(&spans, grid.n_context, grid.n_incomplete), grid, "{}", d.id);
        let out = apply_edits(&d.incomplete.tokens, &d.context_tokens(), &spans);
        assert_eq!(out.tokens, d.rewrite.as_ref().unwrap().tokens, "{}", d.id);
    }
    assert!(aligned * 100 >= 95 * data.len(), "{aligned}/{}", data.len());
}

#[test]
fn short_training_run_rewrites_with_context_words() {
    let data = make_synthetic_corpus(8, 12);
    let mut model = Model::new(small_config(), Vocab::build(&data)).unwrap();
    let prepared: Vec<_> = data.iter().map(|d| prepare(d, &model.vocab).unwrap()).collect();
    let mut adam = Adam::new(AdamConfig { warmup: 5, ..AdamConfig::default() }, &model.params);
    for step in 0..15 {
        let batch: Vec<_> = batch_indices(prepared.len(), 4, step, 5).into_iter().map(|i| &prepared[i]).collect();
        let log = train_step(&mut model, &mut adam, &batch, step).unwrap();
        assert!(log.l_final.is_finite() && log.l_final >= log.l_edit);
    }
    let preds: Vec<_> = data.iter().map(|d| model.rewrite(d).unwrap()).collect();
    for (d, p) in data.iter().zip(&preds) {
        let ctx = d.context_tokens();
        assert!(p.tokens.iter().all(|t| d.incomplete.tokens.contains(t) || ctx.contains(t)), "{}", d.id);
        assert_eq!(p.relevance.len(), d.context.len());
        assert_eq!(p.grid.cells.len(), ctx.len() * d.incomplete.len());
        assert_eq!(model.rewrite(d).unwrap(), *p);
    }
    let items: Vec<_> = data
        .iter()
        .zip(&preds)
        .map(|(d, p)| Scored { pred: &p.tokens, incomplete: &d.incomplete.tokens, reference: &d.rewrite.as_ref().unwrap().tokens })
        .collect();
    let m = evaluate(&items, BleuOptions::default()).unwrap();
    for v in [m.bleu1, m.bleu2, m.rouge1, m.rouge2, m.rouge_l, m.f1, m.f2, m.f3, m.exact_match] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn unknown_words_survive_rewriting() {
    let train = make_synthetic_corpus(1, 6);
    let model = Model::new(small_config(), Vocab::build(&train)).unwrap();
    let d = Dialogue::new("oov", &["zyxwv qwerty visited plinth ."], "did he enjoy it ?", None).unwrap();
    let p = model.rewrite(&d).unwrap();
    let pool: Vec<String> = d.context_tokens().into_iter().chain(d.incomplete.tokens.clone()).collect();
    assert!(p.tokens.iter().all(|t| pool.contains(t)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_edits_is_identity(words in prop::collection::vec("[a-z]{1,6}", 1..10), ctx in prop::collection::vec("[a-z]{1,6}", 1..10)) {
        let out = apply_edits(&words, &ctx, &[]);
        prop_assert_eq!(out.tokens, words);
        prop_assert_eq!(out.conflicts, 0);
    }
}
