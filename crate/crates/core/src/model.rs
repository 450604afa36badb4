//! The full multi-task model: encoder plus heads, batch losses for training
//! and edit-based rewriting for inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::corpus::{encode_example, Dialogue, EncodedExample, Vocab};
use crate::encoder::{pool_utterances, Dropout, Encoder};
use crate::error::{Error, Result};
use crate::heads::{merge_in_graph, EditGridHead, IntentionHead, MatchHead, MergeMode, PredictedEditGrid, SelectHead};
use crate::objective::{combine, negative_seed, sample_negatives, LossBreakdown};
use crate::params::{Init, ParamStore};
use crate::rewriter::{apply_edits, decode_grid, EditSpan};
use crate::supervision::{build_gold_edit_grid, default_stopwords, relevance_labels, AlignStatus, GoldEditGrid, RelevanceLabels};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub select: SelectHead,
    pub matcher: MatchHead,
    pub grid: EditGridHead,
    pub intent: IntentionHead,
}

/// A training example with its derived supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub encoded: EncodedExample,
    pub owners: Vec<usize>,
    pub incomplete: Vec<String>,
    pub context: Vec<String>,
    pub rewrite: Vec<String>,
    pub gold: GoldEditGrid,
    pub status: AlignStatus,
    pub labels: RelevanceLabels,
}

pub fn prepare(d: &Dialogue, vocab: &Vocab) -> Result<Prepared> {
    let rewrite = d.rewrite.as_ref().ok_or_else(|| Error::MissingRewrite { id: d.id.clone() })?;
    let (gold, status) = build_gold_edit_grid(d)?;
    Ok(Prepared {
        id: d.id.clone(),
        encoded: encode_example(d, vocab),
        owners: d.context_owners(),
        incomplete: d.incomplete.tokens.clone(),
        context: d.context_tokens(),
        rewrite: rewrite.tokens.clone(),
        gold,
        status,
        labels: relevance_labels(d, &default_stopwords())?,
    })
}

/// Graph handles for one example.
pub struct ExampleNodes {
    /// Context utterance vectors, `n x d`.
    pub c: Var,
    pub u: Var,
    /// `n x 1`, present when context selection is on.
    pub relevance: Option<Var>,
    /// Raw and merged cell distributions, present when the grid was run.
    pub probs: Option<Var>,
    pub merged: Option<Var>,
}

/// Loss nodes of one batch; skipped components are `None`.
pub struct BatchLosses {
    pub edit: Option<Var>,
    pub sel: Option<Var>,
    pub mat: Option<Var>,
    pub int: Option<Var>,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Output of [`Model::rewrite`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<String>,
    pub spans: Vec<EditSpan>,
    /// Empty when context selection is off.
    pub relevance: Vec<f64>,
    pub conflicts: usize,
    pub grid: PredictedEditGrid,
}

const DROPOUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl Model {
    pub fn new(config: RunConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init::new(config.seed);
        let d = config.encoder.d_model;
        let encoder = Encoder::new(config.encoder.clone(), vocab.len(), &mut params, &mut init)?;
        let select = SelectHead::new(&mut params, &mut init, d);
        let matcher = MatchHead::new(&mut params, &mut init, d);
        let grid = EditGridHead::new(&mut params, &mut init, d, config.unet_channels);
        let intent = IntentionHead::new(&mut params, &mut init, d, config.d_int);
        Ok(Model { config, vocab, params, encoder, select, matcher, grid, intent })
    }

    /// Rebuilds the architecture for `config`/`vocab` and installs saved
    /// parameters, which must match by name and shape.
    pub fn from_params(config: RunConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        let mut m = Model::new(config, vocab)?;
        if params.len() != m.params.len() {
            return Err(Error::MissingParam(format!("expected {} tensors, found {}", m.params.len(), params.len())));
        }
        for (i, (name, t)) in m.params.iter().enumerate() {
            if params.name(i) != name || params.get(i).shape() != t.shape() {
                return Err(Error::MissingParam(format!("{name} {:?}", t.shape())));
            }
        }
        m.params = params;
        Ok(m)
    }

    fn dropout(&self, id: &str, step: u64) -> Option<Dropout> {
        let p = self.config.encoder.dropout;
        (p > 0.0).then(|| Dropout::new(p, negative_seed(self.config.seed ^ DROPOUT_SALT, step, id)))
    }

    /// Relevance-merge strength at a training step: ramps linearly from 0 to
    /// 1 over `merge_warmup` steps.
    pub fn merge_strength(&self, step: u64) -> f64 {
        let w = self.config.merge_warmup as u64;
        if step >= w {
            1.0
        } else {
            step as f64 / w as f64
        }
    }

    /// Encoder, selection, edit grid and merge for one example. SOFT merging
    /// adds `merge_strength * r`; HARD merging applies only at full strength.
    pub fn forward_example(
        &self,
        g: &mut Graph<'_>,
        x: &EncodedExample,
        owners: &[usize],
        with_grid: bool,
        merge_strength: f64,
        dropout: Option<&mut Dropout>,
    ) -> Result<ExampleNodes> {
        let st = self.encoder.forward(g, x, dropout)?;
        let (c, u) = pool_utterances(g, st.h, &x.segment_spans)?;
        let mode = self.config.merge_mode();
        let relevance = self.config.switches.cs.then(|| self.select.forward(g, c, u));
        let (mut probs, mut merged) = (None, None);
        if with_grid {
            let ctx = g.gather_rows(st.h, &x.context_positions());
            let (s, e) = x.incomplete_span();
            let inc = g.slice_rows(st.h, s, e - s);
            let p = self.grid.forward(g, ctx, inc);
            probs = Some(p);
            merged = Some(match (relevance, mode) {
                (Some(r), MergeMode::Soft) if merge_strength > 0.0 => {
                    let r = if merge_strength < 1.0 { g.scale(r, merge_strength) } else { r };
                    merge_in_graph(g, p, r, owners, x.n_incomplete, self.config.merge_alpha, mode, self.config.tau)?
                }
                (Some(r), MergeMode::Hard) if merge_strength >= 1.0 => {
                    merge_in_graph(g, p, r, owners, x.n_incomplete, self.config.merge_alpha, mode, self.config.tau)?
                }
                _ => p,
            });
        }
        Ok(ExampleNodes { c, u, relevance, probs, merged })
    }

    /// All enabled losses for a batch. `step` seeds negative sampling and
    /// dropout per example id, so batch order does not matter.
    pub fn batch_losses(&self, g: &mut Graph<'_>, batch: &[&Prepared], step: u64, train: bool) -> Result<BatchLosses> {
        let sw = self.config.switches;
        let w = self.config.effective_weights();
        let strength = if train { self.merge_strength(step) } else { 1.0 };
        let mut nodes = Vec::with_capacity(batch.len());
        for ex in batch {
            let aligned = ex.status == AlignStatus::Aligned;
            let mut dr = if train { self.dropout(&ex.id, step) } else { None };
            nodes.push(self.forward_example(g, &ex.encoded, &ex.owners, aligned, strength, dr.as_mut())?);
        }
        let mut bd = LossBreakdown::default();

        // edit: mean over aligned examples of the class-weighted cell NLL
        let mut edit_terms = Vec::new();
        for (ex, n) in batch.iter().zip(&nodes) {
            if let Some(m) = n.merged {
                let gold: Vec<usize> = ex.gold.cells.iter().map(|t| t.index()).collect();
                let wts: Vec<f64> = gold.iter().map(|&k| self.config.class_weights[k]).collect();
                bd.n_cells += gold.len();
                edit_terms.push(g.nll(m, &gold, &wts));
            }
        }
        let edit = mean_node(g, &edit_terms);

        // selection: mean over examples of per-utterance BCE
        let mut sel = None;
        if sw.cs {
            let mut terms = Vec::new();
            for (ex, n) in batch.iter().zip(&nodes) {
                let labels: Vec<f64> = ex.labels.r.iter().map(|&b| f64::from(u8::from(b))).collect();
                bd.n_utterances += labels.len();
                terms.push(g.bce(n.relevance.expect("selection is on"), &labels));
            }
            sel = mean_node(g, &terms);
        }

        // rewrite encodings feed matching and intention
        let need_r = sw.cs && (sw.cm || sw.ic);
        let mut r_vecs: Vec<Option<Var>> = vec![None; batch.len()];
        if need_r {
            for (k, ex) in batch.iter().enumerate() {
                if ex.status == AlignStatus::Aligned {
                    let mut dr = if train { self.dropout(&format!("{}#rw", ex.id), step) } else { None };
                    r_vecs[k] = Some(self.encoder.encode_rewrite(g, &ex.rewrite, &self.vocab, dr.as_mut())?);
                }
            }
        }

        // matching: positives C_P against k sampled negatives, pooled BCE
        let mut mat = None;
        if sw.cs && sw.cm && batch.len() >= 2 {
            let index: Vec<(&str, usize)> = batch.iter().map(|e| (e.id.as_str(), e.owners.last().map_or(0, |o| o + 1))).collect();
            let mut parts = Vec::new();
            for (k, ex) in batch.iter().enumerate() {
                let Some(r) = r_vecs[k] else { continue };
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                if !ex.labels.positives.is_empty() {
                    rows.push(g.gather_rows(nodes[k].c, &ex.labels.positives));
                    labels.extend(core::iter::repeat_n(1.0, ex.labels.positives.len()));
                }
                for neg in sample_negatives(&index, k, self.config.negatives, self.config.seed, step) {
                    let src = batch.iter().position(|e| e.id == neg.example_id).expect("negative comes from the batch");
                    rows.push(g.gather_rows(nodes[src].c, &[neg.utterance]));
                    labels.push(0.0);
                }
                if labels.is_empty() {
                    continue;
                }
                let cands = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
                let scores = self.matcher.forward(g, cands, nodes[k].u, r)?;
                parts.push((g.bce(scores, &labels), labels.len()));
            }
            let total: usize = parts.iter().map(|p| p.1).sum();
            if total > 0 {
                bd.n_pairs = total;
                let terms: Vec<(Var, f64)> = parts.iter().map(|&(v, n)| (v, n as f64 / total as f64)).collect();
                mat = Some(g.weighted_sum(&terms));
            }
        }

        // intention: KL between the projected context and rewrite
        let mut int = None;
        if sw.cs && sw.ic {
            let mut terms = Vec::new();
            for (k, ex) in batch.iter().enumerate() {
                let Some(r) = r_vecs[k] else { continue };
                if let Some((p_ctx, p_rw)) = self.intent.forward(g, nodes[k].c, nodes[k].u, r, &ex.labels.positives) {
                    terms.push(g.kl(p_ctx, p_rw));
                }
            }
            bd.n_intent = terms.len();
            int = mean_node(g, &terms);
        }

        let value = |g: &Graph<'_>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        bd.l_edit = value(g, edit);
        bd.l_sel = value(g, sel);
        bd.l_mat = value(g, mat);
        bd.l_int = value(g, int);
        let bd = combine(bd, w)?;

        let zero = g.constant(Tensor::scalar(0.0));
        let terms = [(edit.unwrap_or(zero), 1.0), (sel.unwrap_or(zero), w.sel), (mat.unwrap_or(zero), w.mat), (int.unwrap_or(zero), w.int)];
        let total = g.weighted_sum(&terms);
        debug_assert_eq!(g.value(total).item(), bd.l_final);
        Ok(BatchLosses { edit, sel, mat, int, total, breakdown: bd })
    }

    /// Rewrites one dialogue: predicted (merged) grid, span decoding and
    /// deterministic application. Surface tokens are copied, so unknown words
    /// survive.
    pub fn rewrite(&self, d: &Dialogue) -> Result<Prediction> {
        let x = encode_example(d, &self.vocab);
        let owners = d.context_owners();
        let mut g = Graph::new(&self.params);
        let n = self.forward_example(&mut g, &x, &owners, true, 1.0, None)?;
        let merged = n.merged.expect("grid was requested");
        let grid = PredictedEditGrid::from_tensor(g.value(merged), x.n_context, x.n_incomplete, n.relevance.is_some());
        let relevance = n.relevance.map(|r| g.value(r).data.clone()).unwrap_or_default();
        let spans = decode_grid(&grid.view(), &owners);
        let out = apply_edits(&d.incomplete.tokens, &d.context_tokens(), &spans);
        Ok(Prediction { tokens: out.tokens, spans, relevance, conflicts: out.conflicts, grid })
    }
}

fn mean_node(g: &mut Graph<'_>, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let w = 1.0 / terms.len() as f64;
    let t: Vec<(Var, f64)> = terms.iter().map(|&v| (v, w)).collect();
    Some(g.weighted_sum(&t))
}
