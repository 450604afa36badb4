//! Checkpoints: config echo, vocabulary, named tensors, step, RNG state and
//! optimizer moments, stored as JSON with round-trip float formatting.

use std::path::{Path, PathBuf};

use iur_core::params::{Adam, ParamStore};
use iur_core::{Model, RunConfig, Vocab};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// All randomness is a pure function of the seed and the step counter, so
/// this pair is the complete generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    pub step: usize,
    pub rng: RngState,
    #[serde(default)]
    pub optimizer: Option<Adam>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("unsupported checkpoint format {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("{0}")]
    Model(#[from] iur_core::Error),
}

impl Checkpoint {
    pub fn new(model: &Model, step: usize, optimizer: Option<&Adam>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            vocab: model.vocab.tokens().to_vec(),
            params: model.params.clone(),
            step,
            rng: RngState { seed: model.config.seed, step: step as u64 },
            optimizer: optimizer.cloned(),
        }
    }

    pub fn model(&self) -> Result<Model, CheckpointError> {
        let vocab = Vocab::from_tokens(&self.vocab)?;
        Ok(Model::from_params(self.config.clone(), vocab, self.params.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| CheckpointError::Parse { path: path.to_path_buf(), source })?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ck.format_version));
        }
        Ok(ck)
    }
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    Checkpoint::load(path)?.model()
}
