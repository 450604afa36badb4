use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use iur_cli::checkpoint::load_model;
use iur_cli::commands::{self, Rewriter};
use iur_cli::config::{self, CliConfig};
use iur_cli::io;
use iur_core::corpus::make_synthetic_corpus;
use iur_core::metrics::{BleuMode, BleuOptions};

#[derive(Parser)]
#[command(name = "iur", version, about = "Incomplete utterance rewriting: train, evaluate, rewrite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key: value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<CliConfig> {
        let mut c = match &self.config {
            Some(p) => config::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(s) = self.seed {
            config::set_seed(&mut c.run, s);
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Training JSONL (overrides `train_data`)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dev JSONL (overrides `dev_data`)
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Overrides the configured step count
        #[arg(long)]
        steps: Option<usize>,
        /// Final checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Step log, one JSON object per line [default: <out>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Best-dev checkpoint [default: <out>.best]
        #[arg(long)]
        best: Option<PathBuf>,
    },
    /// Score rewrites against gold references
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Metrics report JSON [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-example scores
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Apply gold edit grids instead of a model
        #[arg(long)]
        oracle: bool,
        /// Average sentence-level BLEU instead of corpus BLEU
        #[arg(long)]
        sentence_bleu: bool,
        /// Disable add-one smoothing of zero n-gram precisions
        #[arg(long)]
        no_smoothing: bool,
    },
    /// Rewrite dialogues with a trained model
    Rewrite {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write predicted cell probabilities as JSONL
        #[arg(long)]
        dump_grid: Option<PathBuf>,
    },
    /// Emit gold relevance vectors and edit grids
    Labels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail if any ALIGNED grid does not reproduce its rewrite
        #[arg(long)]
        verify: bool,
    },
    /// Train and score the six module-switch settings
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Synthetic corpus size
        #[arg(long, default_value_t = 2000)]
        size: usize,
        /// Held-out examples taken from the end of the corpus
        #[arg(long, default_value_t = 200)]
        held_out: usize,
        #[arg(long)]
        steps: Option<usize>,
        /// Markdown table [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full reports as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a synthetic corpus as JSONL
    Synth {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a CANARD-style JSON file to JSONL
    ConvertCanard {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, data, dev, steps, out, log, best } => {
            let mut c = common.load()?;
            if let Some(s) = steps {
                c.run.steps = s;
            }
            let data = data.or(c.train_data.clone()).context("no training data: pass --data or set train_data")?;
            let train = io::load_jsonl(&data)?;
            let dev = dev.or(c.dev_data.clone()).map(|p| io::load_jsonl(&p)).transpose()?;
            let mut logs = Vec::new();
            let run = commands::train(&c.run, &train, dev.as_deref(), c.eval_every, |l| logs.push(*l))?;
            io::write_jsonl(&log.unwrap_or_else(|| with_suffix(&out, ".log.jsonl")), &logs)?;
            run.final_checkpoint().save(&out)?;
            if let Some(b) = &run.best {
                b.checkpoint.save(&best.unwrap_or_else(|| with_suffix(&out, ".best")))?;
                eprintln!("best dev exact match {:.4} at step {}", b.report.exact_match, b.step);
            }
            if let Some(l) = logs.last() {
                eprintln!("step {} L_final {:.6}", l.step, l.l_final);
            }
        }
        Command::Eval { checkpoint, data, out, csv, oracle, sentence_bleu, no_smoothing } => {
            let ds = io::load_jsonl(&data)?;
            let model = if oracle { None } else { Some(load_model(checkpoint.as_deref().expect("required by clap"))?) };
            let rw = model.as_ref().map_or(Rewriter::GoldOracle, Rewriter::Model);
            let options = BleuOptions { mode: if sentence_bleu { BleuMode::Sentence } else { BleuMode::Corpus }, smoothing: !no_smoothing };
            let (report, rows) = commands::evaluate(&rw, &ds, options)?;
            match out {
                Some(p) => io::write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            if let Some(p) = csv {
                commands::write_scores_csv(&p, &rows)?;
            }
        }
        Command::Rewrite { checkpoint, data, out, dump_grid } => {
            let model = load_model(&checkpoint)?;
            let (recs, grids) = commands::rewrite(&model, &io::load_jsonl(&data)?)?;
            io::write_jsonl(&out, &recs)?;
            if let Some(p) = dump_grid {
                io::write_jsonl(&p, &grids)?;
            }
        }
        Command::Labels { data, out, verify } => {
            let recs = commands::labels(&io::load_jsonl(&data)?)?;
            io::write_jsonl(&out, &recs)?;
            let aligned = recs.iter().filter(|r| r.status == "ALIGNED").count();
            eprintln!("{aligned}/{} ALIGNED", recs.len());
            if verify {
                let failed = commands::verify_labels(&recs);
                if !failed.is_empty() {
                    eprintln!("round trip failed for: {}", failed.join(", "));
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Ablate { common, size, held_out, steps, out, json } => {
            let mut c = common.load()?;
            if let Some(s) = steps {
                c.run.steps = s;
            }
            if held_out == 0 || held_out >= size {
                bail!("held_out must be in 1..size");
            }
            let (train, test) = commands::synthetic_split(c.run.seed, size, held_out);
            let rows = commands::ablate(&c.run, &train, &test, |r| eprintln!("{}: EM {:.3}", r.label, r.report.exact_match))?;
            let table = commands::render_table(&rows);
            match out {
                Some(p) => std::fs::write(&p, &table).with_context(|| p.display().to_string())?,
                None => print!("{table}"),
            }
            if let Some(p) = json {
                let v: Vec<_> = rows.iter().map(|r| serde_json::json!({"label": r.label, "switches": r.switches, "report": r.report, "final_loss": r.final_loss})).collect();
                io::write_json(&p, &v)?;
            }
        }
        Command::Synth { seed, size, out } => io::save_dialogues(&out, &make_synthetic_corpus(seed, size))?,
        Command::ConvertCanard { data, out } => {
            let text = std::fs::read_to_string(&data).with_context(|| data.display().to_string())?;
            io::save_dialogues(&out, &io::convert_canard(&text, &data.display().to_string())?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }
}
