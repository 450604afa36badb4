//! The command implementations behind the `iur` binary.

use std::fmt::Write as _;

use anyhow::{bail, ensure, Context, Result};
use iur_core::corpus::make_synthetic_corpus;
use iur_core::metrics::{self, BleuOptions, MetricsReport, Scored};
use iur_core::model::prepare;
use iur_core::params::Adam;
use iur_core::rewriter::{apply_edits, decode_grid, EditSpan};
use iur_core::supervision::{build_gold_edit_grid, relevance_labels, AlignStatus, GridView, default_stopwords};
use iur_core::train::{batch_indices, train_step, StepLog};
use iur_core::config::ablation_rows;
use iur_core::heads::PredictedEditGrid;
use iur_core::{Dialogue, Model, RunConfig, Switches, Vocab};
use serde::Serialize;

use crate::checkpoint::Checkpoint;

fn require_gold(data: &[Dialogue]) -> Result<()> {
    ensure!(!data.is_empty(), "empty dataset");
    let missing: Vec<&str> = data.iter().filter(|d| d.rewrite.is_none()).map(|d| d.id.as_str()).collect();
    if !missing.is_empty() {
        bail!("{} example(s) lack a gold rewrite: {}", missing.len(), missing.join(", "));
    }
    Ok(())
}

/// Best dev result seen during training.
#[derive(Debug, Clone)]
pub struct BestDev {
    pub step: usize,
    pub report: MetricsReport,
    pub checkpoint: Checkpoint,
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: Model,
    pub adam: Adam,
    pub logs: Vec<StepLog>,
    pub dev: Vec<(usize, MetricsReport)>,
    pub best: Option<BestDev>,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, self.config().steps, Some(&self.adam))
    }

    fn config(&self) -> &RunConfig {
        &self.model.config
    }
}

/// Trains from scratch for `config.steps` steps. The vocabulary comes from
/// the training data; dev data (if any) is scored every `eval_every` steps
/// and after the last step, and the best exact-match checkpoint is kept.
pub fn train(
    config: &RunConfig,
    data: &[Dialogue],
    dev: Option<&[Dialogue]>,
    eval_every: usize,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainRun> {
    config.validate().context("invalid configuration")?;
    require_gold(data)?;
    if let Some(dev) = dev {
        require_gold(dev).context("dev data")?;
    }
    let vocab = Vocab::build(data);
    let mut model = Model::new(config.clone(), vocab)?;
    let prepared = data.iter().map(|d| prepare(d, &model.vocab)).collect::<Result<Vec<_>, _>>()?;
    let mut adam = Adam::new(config.optimizer.clone(), &model.params);
    let mut logs = Vec::with_capacity(config.steps);
    let mut dev_log = Vec::new();
    let mut best: Option<BestDev> = None;
    for step in 0..config.steps {
        let batch: Vec<_> = batch_indices(prepared.len(), config.batch_size, step, config.seed).into_iter().map(|i| &prepared[i]).collect();
        let log = train_step(&mut model, &mut adam, &batch, step)?;
        on_step(&log);
        logs.push(log);
        let done = step + 1;
        let due = done == config.steps || (eval_every > 0 && done % eval_every == 0);
        if let (Some(dev), true) = (dev, due) {
            let (report, _) = evaluate(&Rewriter::Model(&model), dev, BleuOptions::default())?;
            let better = best.as_ref().is_none_or(|b| (report.exact_match, report.bleu1) > (b.report.exact_match, b.report.bleu1));
            if better {
                best = Some(BestDev { step: done, report: report.clone(), checkpoint: Checkpoint::new(&model, done, Some(&adam)) });
            }
            dev_log.push((done, report));
        }
    }
    Ok(TrainRun { model, adam, logs, dev: dev_log, best })
}

/// Source of rewrites for evaluation.
pub enum Rewriter<'a> {
    Model(&'a Model),
    /// Applies the gold edit grid, bypassing the model; unalignable examples
    /// come back unchanged.
    GoldOracle,
}

impl Rewriter<'_> {
    pub fn rewrite(&self, d: &Dialogue) -> Result<Vec<String>> {
        Ok(match self {
            Rewriter::Model(m) => m.rewrite(d)?.tokens,
            Rewriter::GoldOracle => {
                let (grid, _) = build_gold_edit_grid(d)?;
                let spans = decode_grid(&GridView::Gold(&grid), &d.context_owners());
                apply_edits(&d.incomplete.tokens, &d.context_tokens(), &spans).tokens
            }
        })
    }
}

/// Per-example scores, one CSV row each. Restoration scores are empty when
/// the reference restores nothing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub id: String,
    pub prediction: String,
    pub exact_match: bool,
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    pub f3: Option<f64>,
}

pub fn evaluate(rewriter: &Rewriter<'_>, data: &[Dialogue], options: BleuOptions) -> Result<(MetricsReport, Vec<ExampleScore>)> {
    require_gold(data)?;
    let preds = data.iter().map(|d| rewriter.rewrite(d)).collect::<Result<Vec<_>>>()?;
    let items: Vec<Scored<'_>> = data
        .iter()
        .zip(&preds)
        .map(|(d, p)| Scored { pred: p, incomplete: &d.incomplete.tokens, reference: &d.rewrite.as_ref().expect("checked").tokens })
        .collect();
    let report = metrics::evaluate(&items, options)?;
    let mut rows = Vec::with_capacity(items.len());
    for (d, s) in data.iter().zip(&items) {
        let f = |n| metrics::restoration_fscore(s.pred, s.incomplete, s.reference, n);
        rows.push(ExampleScore {
            id: d.id.clone(),
            prediction: s.pred.join(" "),
            exact_match: s.pred == s.reference,
            bleu1: metrics::sentence_bleu(s.pred, s.reference, 1, options.smoothing)?.score,
            bleu2: metrics::sentence_bleu(s.pred, s.reference, 2, options.smoothing)?.score,
            rouge1: metrics::rouge_n(s.pred, s.reference, 1),
            rouge2: metrics::rouge_n(s.pred, s.reference, 2),
            rouge_l: metrics::rouge_l(s.pred, s.reference),
            f1: f(1),
            f2: f(2),
            f3: f(3),
        });
    }
    Ok((report, rows))
}

pub fn write_scores_csv(path: &std::path::Path, rows: &[ExampleScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanRecord {
    pub kind: &'static str,
    pub context: (usize, usize),
    pub column: usize,
    pub utterance: usize,
}

impl From<&EditSpan> for SpanRecord {
    fn from(s: &EditSpan) -> Self {
        SpanRecord { kind: s.kind.as_str(), context: s.context, column: s.column, utterance: s.utterance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewriteRecord {
    pub id: String,
    pub rewrite: String,
    pub spans: Vec<SpanRecord>,
    pub relevance: Vec<f64>,
    pub conflicts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRecord {
    pub id: String,
    #[serde(flatten)]
    pub grid: PredictedEditGrid,
}

pub fn rewrite(model: &Model, data: &[Dialogue]) -> Result<(Vec<RewriteRecord>, Vec<GridRecord>)> {
    let mut out = Vec::with_capacity(data.len());
    let mut grids = Vec::with_capacity(data.len());
    for d in data {
        let p = model.rewrite(d).with_context(|| format!("dialogue {}", d.id))?;
        out.push(RewriteRecord {
            id: d.id.clone(),
            rewrite: p.tokens.join(" "),
            spans: p.spans.iter().map(SpanRecord::from).collect(),
            relevance: p.relevance,
            conflicts: p.conflicts,
        });
        grids.push(GridRecord { id: d.id.clone(), grid: p.grid });
    }
    Ok((out, grids))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRecord {
    pub id: String,
    #[serde(rename = "R")]
    pub r: Vec<u8>,
    pub edits: Vec<(usize, usize, &'static str)>,
    pub status: &'static str,
    /// Whether decoding and applying the gold grid reproduces the rewrite.
    pub round_trip: bool,
}

pub fn labels(data: &[Dialogue]) -> Result<Vec<LabelRecord>> {
    require_gold(data)?;
    let stop = default_stopwords();
    data.iter()
        .map(|d| {
            let rel = relevance_labels(d, &stop)?;
            let (grid, status) = build_gold_edit_grid(d)?;
            let spans = decode_grid(&GridView::Gold(&grid), &d.context_owners());
            let rebuilt = apply_edits(&d.incomplete.tokens, &d.context_tokens(), &spans).tokens;
            Ok(LabelRecord {
                id: d.id.clone(),
                r: rel.r.iter().map(|&b| b as u8).collect(),
                edits: grid.edits().into_iter().map(|(i, j, t)| (i, j, t.as_str())).collect(),
                status: status.as_str(),
                round_trip: rebuilt == d.rewrite.as_ref().expect("checked").tokens,
            })
        })
        .collect()
}

/// Ids of ALIGNED examples whose gold grid fails the round trip.
pub fn verify_labels(records: &[LabelRecord]) -> Vec<&str> {
    records.iter().filter(|r| r.status == AlignStatus::Aligned.as_str() && !r.round_trip).map(|r| r.id.as_str()).collect()
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub switches: Switches,
    pub report: MetricsReport,
    pub final_loss: f64,
}

/// Deterministic train/held-out split of a synthetic corpus.
pub fn synthetic_split(seed: u64, size: usize, held_out: usize) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut all = make_synthetic_corpus(seed, size);
    let test = all.split_off(size - held_out.min(size));
    (all, test)
}

/// Trains and scores each of the six switch settings with the base
/// config's seed and hyperparameters.
pub fn ablate(base: &RunConfig, data: &[Dialogue], test: &[Dialogue], mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for switches in ablation_rows() {
        let config = RunConfig { switches, ..base.clone() };
        let run = train(&config, data, None, 0, |_| {})?;
        let (report, _) = evaluate(&Rewriter::Model(&run.model), test, BleuOptions::default())?;
        let row = AblationRow { label: switches.label(), switches, report, final_loss: run.logs.last().map_or(0.0, |l| l.l_final) };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Markdown table with B1/B2/R1/R2/F1/F2/F3 and exact match, in percent.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Model | B1 | B2 | R1 | R2 | F1 | F2 | F3 | EM |\n|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.report;
        let cells = [m.bleu1, m.bleu2, m.rouge1, m.rouge2, m.f1, m.f2, m.f3, m.exact_match].map(|x| format!("{:.1}", 100.0 * x));
        writeln!(s, "| {} | {} |", r.label, cells.join(" | ")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize) -> Vec<Dialogue> {
        make_synthetic_corpus(11, n)
    }

    #[test]
    fn missing_gold_lists_ids() {
        let mut ds = data(3);
        ds[1].rewrite = None;
        let e = evaluate(&Rewriter::GoldOracle, &ds, BleuOptions::default()).unwrap_err().to_string();
        assert!(e.contains(&ds[1].id), "{e}");
        assert!(evaluate(&Rewriter::GoldOracle, &[], BleuOptions::default()).is_err());
    }

    #[test]
    fn oracle_scores_perfectly_on_aligned_data() {
        let ds: Vec<_> = data(40).into_iter().filter(|d| build_gold_edit_grid(d).unwrap().1 == AlignStatus::Aligned).collect();
        let (m, rows) = evaluate(&Rewriter::GoldOracle, &ds, BleuOptions::default()).unwrap();
        assert_eq!((m.bleu1, m.rouge1, m.exact_match), (1.0, 1.0, 1.0));
        assert!(rows.iter().all(|r| r.exact_match));
    }

    #[test]
    fn labels_mostly_aligned_and_verified() {
        let recs = labels(&data(200)).unwrap();
        let aligned = recs.iter().filter(|r| r.status == "ALIGNED").count();
        assert!(aligned * 100 >= 95 * recs.len(), "{aligned}/200");
        assert!(verify_labels(&recs).is_empty());
        let mut bad = recs.clone();
        bad[0].round_trip = false;
        bad[0].status = "ALIGNED";
        assert_eq!(verify_labels(&bad), [bad[0].id.as_str()]);
    }

    #[test]
    fn table_has_all_rows_and_columns() {
        let report = evaluate(&Rewriter::GoldOracle, &data(5), BleuOptions::default()).unwrap().0;
        let rows: Vec<_> = ablation_rows()
            .into_iter()
            .map(|s| AblationRow { label: s.label(), switches: s, report: report.clone(), final_loss: 0.0 })
            .collect();
        let t = render_table(&rows);
        assert!(t.starts_with("| Model | B1 | B2 | R1 | R2 | F1 | F2 | F3 | EM |"));
        assert_eq!(t.lines().count(), 8);
        assert!(t.contains("| +cs/sm/ic/cm |"));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = synthetic_split(3, 50, 10);
        assert_eq!((a.len(), b.len()), (40, 10));
        assert_eq!(synthetic_split(3, 50, 10).1, b);
        assert!(a.iter().all(|d| b.iter().all(|e| e.id != d.id)));
    }
}
