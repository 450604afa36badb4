//! Flat `key: value` configuration files.
//!
//! Blank lines and `#` comments are ignored; keys are applied in file order
//! on top of the defaults, and unknown or repeated keys are errors.
//! `merge_mode` is shorthand for the `sm`/`hm` switches.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use iur_core::{MergeMode, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub run: RunConfig,
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    /// Dev evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig { run: RunConfig::default(), train_data: None, dev_data: None, eval_every: 200 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Invalid(#[from] iur_core::Error),
}

pub const KEYS: &[&str] = &[
    "d_model", "n_layers", "n_heads", "d_ff", "max_len", "dropout", "d_int", "unet_channels", "merge_alpha", "merge_mode", "tau",
    "merge_warmup", "alpha1", "alpha2", "alpha3", "class_weights", "negatives", "lr", "beta1", "beta2", "eps", "warmup",
    "clip_norm", "steps", "batch_size", "seed", "train_data", "dev_data", "eval_every", "cs", "cm", "sm", "hm", "ic",
];

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("bad value {v:?}: {e}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("bad switch value {v:?}")),
    }
}

pub fn parse_merge_mode(v: &str) -> Result<MergeMode, String> {
    match v.to_ascii_uppercase().as_str() {
        "SOFT" => Ok(MergeMode::Soft),
        "HARD" => Ok(MergeMode::Hard),
        "OFF" => Ok(MergeMode::Off),
        _ => Err(format!("bad merge_mode {v:?} (SOFT|HARD|OFF)")),
    }
}

fn set(c: &mut CliConfig, key: &str, v: &str) -> Result<(), String> {
    let r = &mut c.run;
    match key {
        "d_model" => r.encoder.d_model = num(v)?,
        "n_layers" => r.encoder.n_layers = num(v)?,
        "n_heads" => r.encoder.n_heads = num(v)?,
        "d_ff" => r.encoder.d_ff = num(v)?,
        "max_len" => r.encoder.max_len = num(v)?,
        "dropout" => r.encoder.dropout = num(v)?,
        "d_int" => r.d_int = num(v)?,
        "unet_channels" => r.unet_channels = num(v)?,
        "merge_alpha" => r.merge_alpha = num(v)?,
        "merge_mode" => r.set_merge_mode(parse_merge_mode(v)?),
        "tau" => r.tau = num(v)?,
        "merge_warmup" => r.merge_warmup = num(v)?,
        "alpha1" => r.loss_weights.sel = num(v)?,
        "alpha2" => r.loss_weights.mat = num(v)?,
        "alpha3" => r.loss_weights.int = num(v)?,
        "class_weights" => {
            let ws: Vec<f64> = v.split(',').map(|s| num(s.trim())).collect::<Result<_, _>>()?;
            r.class_weights = ws.try_into().map_err(|_| "class_weights needs three values".to_string())?;
        }
        "negatives" => r.negatives = num(v)?,
        "lr" => r.optimizer.lr = num(v)?,
        "beta1" => r.optimizer.beta1 = num(v)?,
        "beta2" => r.optimizer.beta2 = num(v)?,
        "eps" => r.optimizer.eps = num(v)?,
        "warmup" => r.optimizer.warmup = num(v)?,
        "clip_norm" => r.optimizer.clip_norm = num(v)?,
        "steps" => r.steps = num(v)?,
        "batch_size" => r.batch_size = num(v)?,
        "seed" => set_seed(r, num(v)?),
        "train_data" => c.train_data = Some(PathBuf::from(v)),
        "dev_data" => c.dev_data = Some(PathBuf::from(v)),
        "eval_every" => c.eval_every = num(v)?,
        "cs" => r.switches.cs = flag(v)?,
        "cm" => r.switches.cm = flag(v)?,
        "sm" => r.switches.sm = flag(v)?,
        "hm" => r.switches.hm = flag(v)?,
        "ic" => r.switches.ic = flag(v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// One seed drives initialization, batching, sampling and dropout.
pub fn set_seed(r: &mut RunConfig, seed: u64) {
    r.seed = seed;
    r.encoder.seed = seed;
}

/// Parses and validates a configuration.
pub fn parse(text: &str) -> Result<CliConfig, ConfigError> {
    let mut c = CliConfig::default();
    let mut seen = BTreeSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError::Line { line: k + 1, message };
        let (key, value) = line.split_once(':').ok_or_else(|| err(format!("expected `key: value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(err(format!("duplicate key {key:?}")));
        }
        set(&mut c, key, value).map_err(err)?;
    }
    c.run.validate()?;
    Ok(c)
}

pub fn load(path: &Path) -> Result<CliConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse(&text)
}

/// Renders every key; `parse(&render(c)) == c` for valid configs.
pub fn render(c: &CliConfig) -> String {
    let r = &c.run;
    let (e, o, w, s) = (&r.encoder, &r.optimizer, &r.loss_weights, &r.switches);
    let mut out = String::new();
    let mut kv = |k: &str, v: String| writeln!(out, "{k}: {v}").unwrap();
    kv("d_model", e.d_model.to_string());
    kv("n_layers", e.n_layers.to_string());
    kv("n_heads", e.n_heads.to_string());
    kv("d_ff", e.d_ff.to_string());
    kv("max_len", e.max_len.to_string());
    kv("dropout", format!("{:?}", e.dropout));
    kv("d_int", r.d_int.to_string());
    kv("unet_channels", r.unet_channels.to_string());
    kv("merge_alpha", format!("{:?}", r.merge_alpha));
    kv("tau", format!("{:?}", r.tau));
    kv("merge_warmup", r.merge_warmup.to_string());
    kv("alpha1", format!("{:?}", w.sel));
    kv("alpha2", format!("{:?}", w.mat));
    kv("alpha3", format!("{:?}", w.int));
    kv("class_weights", r.class_weights.map(|x| format!("{x:?}")).join(", "));
    kv("negatives", r.negatives.to_string());
    kv("lr", format!("{:?}", o.lr));
    kv("beta1", format!("{:?}", o.beta1));
    kv("beta2", format!("{:?}", o.beta2));
    kv("eps", format!("{:?}", o.eps));
    kv("warmup", o.warmup.to_string());
    kv("clip_norm", format!("{:?}", o.clip_norm));
    kv("steps", r.steps.to_string());
    kv("batch_size", r.batch_size.to_string());
    kv("seed", r.seed.to_string());
    if let Some(p) = &c.train_data {
        kv("train_data", p.display().to_string());
    }
    if let Some(p) = &c.dev_data {
        kv("dev_data", p.display().to_string());
    }
    kv("eval_every", c.eval_every.to_string());
    for (k, v) in [("cs", s.cs), ("cm", s.cm), ("sm", s.sm), ("hm", s.hm), ("ic", s.ic)] {
        kv(k, v.to_string());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use iur_core::Switches;

    #[test]
    fn defaults_round_trip() {
        let c = CliConfig::default();
        assert_eq!(parse(&render(&c)).unwrap(), c);
        assert_eq!(parse("").unwrap(), c);
        for k in KEYS {
            if !matches!(*k, "merge_mode" | "train_data" | "dev_data") {
                assert!(render(&c).contains(&format!("{k}: ")), "{k}");
            }
        }
    }

    #[test]
    fn keys_apply() {
        let c = parse("# tiny\nd_model: 16\nn_heads: 2\nseed: 9 # trailing\nmerge_mode: HARD\nclass_weights: 1, 2, 3\ntrain_data: a.jsonl\n").unwrap();
        assert_eq!(c.run.encoder.d_model, 16);
        assert_eq!((c.run.seed, c.run.encoder.seed), (9, 9));
        assert_eq!(c.run.merge_mode(), MergeMode::Hard);
        assert_eq!(c.run.class_weights, [1.0, 2.0, 3.0]);
        assert_eq!(c.train_data.as_deref(), Some(Path::new("a.jsonl")));
        let c = parse("cs: off\ncm: off\nsm: off\nic: off").unwrap();
        assert_eq!(c.run.switches, Switches::BACKBONE);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in ["bogus: 1", "d_model 16", "lr: fast", "merge_mode: MAYBE", "class_weights: 1, 2", "seed: 1\nseed: 2"] {
            assert!(matches!(parse(bad), Err(ConfigError::Line { .. })), "{bad}");
        }
        // cm without cs, sm with hm: rejected before any compute
        assert!(matches!(parse("cs: false"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("hm: true"), Err(ConfigError::Invalid(_))));
        assert!(matches!(parse("merge_alpha: 2"), Err(ConfigError::Invalid(_))));
    }
}
