//! Run configuration and module switches.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::MergeMode;
use crate::objective::LossWeights;
use crate::params::AdamConfig;

/// Module switches: context selection (`cs`), context matching (`cm`), soft
/// merge (`sm`), hard merge (`hm`) and intention check (`ic`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub cs: bool,
    pub cm: bool,
    pub sm: bool,
    pub hm: bool,
    pub ic: bool,
}

impl Switches {
    pub const BACKBONE: Switches = Switches { cs: false, cm: false, sm: false, hm: false, ic: false };
    pub const FULL: Switches = Switches { cs: true, cm: true, sm: true, hm: false, ic: true };

    pub fn validate(&self) -> Result<()> {
        if self.sm && self.hm {
            return Err(Error::Config("sm and hm are mutually exclusive".into()));
        }
        if (self.cm || self.ic || self.sm || self.hm) && !self.cs {
            return Err(Error::Config("cm, ic, sm and hm require cs".into()));
        }
        Ok(())
    }

    pub fn merge_mode(&self) -> MergeMode {
        match (self.cs, self.sm, self.hm) {
            (true, true, _) => MergeMode::Soft,
            (true, _, true) => MergeMode::Hard,
            _ => MergeMode::Off,
        }
    }

    /// Row label in the style `+cs/sm/ic/cm`.
    pub fn label(&self) -> alloc::string::String {
        if !self.cs {
            return "backbone".into();
        }
        let mut s = alloc::string::String::from("+cs");
        for (on, name) in [(self.hm, "hm"), (self.sm, "sm"), (self.ic, "ic"), (self.cm, "cm")] {
            if on {
                s.push('/');
                s.push_str(name);
            }
        }
        s
    }
}

/// The six ablation rows, in table order.
pub fn ablation_rows() -> [Switches; 6] {
    let b = Switches::BACKBONE;
    [
        b,
        Switches { cs: true, ..b },
        Switches { cs: true, hm: true, ..b },
        Switches { cs: true, sm: true, ..b },
        Switches { cs: true, sm: true, ic: true, ..b },
        Switches::FULL,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub d_int: usize,
    pub unet_channels: usize,
    pub merge_alpha: f64,
    pub tau: f64,
    /// Training steps over which relevance merging ramps up to full strength.
    pub merge_warmup: usize,
    pub loss_weights: LossWeights,
    /// NONE, INSERT, REPLACE.
    pub class_weights: [f64; 3],
    pub negatives: usize,
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub switches: Switches,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            d_int: 16,
            unet_channels: 32,
            merge_alpha: 0.5,
            tau: 0.5,
            merge_warmup: 500,
            loss_weights: LossWeights::default(),
            class_weights: [1.0, 5.0, 5.0],
            negatives: 3,
            optimizer: AdamConfig::default(),
            steps: 2000,
            batch_size: 16,
            seed: 17,
            switches: Switches::FULL,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.switches.validate()?;
        self.loss_weights.validate()?;
        let bad = |what: &str| Err(Error::Config(format!("{what} out of range")));
        if !(0.0..=1.0).contains(&self.merge_alpha) {
            return Err(Error::InvalidAlpha(self.merge_alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau");
        }
        if self.class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("class_weights");
        }
        if self.d_int == 0 {
            return bad("d_int");
        }
        if self.unet_channels < 2 {
            return bad("unet_channels");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.clip_norm < 0.0 {
            return bad("optimizer setting");
        }
        Ok(())
    }

    pub fn merge_mode(&self) -> MergeMode {
        self.switches.merge_mode()
    }

    /// Sets `sm`/`hm` from a merge mode.
    pub fn set_merge_mode(&mut self, mode: MergeMode) {
        self.switches.sm = mode == MergeMode::Soft;
        self.switches.hm = mode == MergeMode::Hard;
    }

    /// Loss weights after switches: without `cs` the auxiliary losses are
    /// off; `cm` and `ic` gate matching and intention.
    pub fn effective_weights(&self) -> LossWeights {
        let s = &self.switches;
        let w = &self.loss_weights;
        LossWeights {
            sel: if s.cs { w.sel } else { 0.0 },
            mat: if s.cs && s.cm { w.mat } else { 0.0 },
            int: if s.cs && s.ic { w.int } else { 0.0 },
        }
    }
}
