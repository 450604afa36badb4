//! Small pre-LN transformer encoder over the joint context/incomplete
//! sequence, with mean pooling into utterance vectors.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{encode_standalone, EncodedExample, Vocab};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_len: 128, dropout: 0.0, seed: 17 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::Config("max_len and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), init.glorot(fan_in, fan_out));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(1, dim, 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(1, dim));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Dropout source for training passes; `None` means eval mode.
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout { p, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - self.p);
        let data = (0..r * c)
            .map(|_| {
                let u = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                if u < self.p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        g.mul_const(x, Tensor::from_vec(r, c, data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

/// Graph handles for one encoder pass.
pub struct EncoderStates {
    pub h: Var,
    /// Attention probabilities, one `L x L` node per layer and head.
    pub attention: Vec<Var>,
}

/// Detached encoder output for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Tensor,
    pub c: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub r: Option<Vec<f64>>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_size: usize, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok = store.add("enc.tok", init.normal_tensor(vocab_size, d, 0.1));
        let pos = store.add("enc.pos", init.normal_tensor(config.max_len, d, 0.1));
        let seg = store.add("enc.seg", init.normal_tensor(2, d, 0.1));
        let blocks = (0..config.n_layers)
            .map(|l| Block {
                ln1: LayerNorm::new(store, &format!("enc.{l}.ln1"), d),
                qkv: Linear::new(store, init, &format!("enc.{l}.qkv"), d, 3 * d),
                out: Linear::new(store, init, &format!("enc.{l}.out"), d, d),
                ln2: LayerNorm::new(store, &format!("enc.{l}.ln2"), d),
                ff1: Linear::new(store, init, &format!("enc.{l}.ff1"), d, config.d_ff),
                ff2: Linear::new(store, init, &format!("enc.{l}.ff2"), config.d_ff, d),
            })
            .collect();
        let ln_f = LayerNorm::new(store, "enc.ln_f", d);
        Ok(Encoder { config, tok, pos, seg, blocks, ln_f })
    }

    /// Token states for the whole sequence. Errors on sequences longer than
    /// `max_len`; nothing is truncated.
    pub fn forward(&self, g: &mut Graph<'_>, x: &EncodedExample, mut dropout: Option<&mut Dropout>) -> Result<EncoderStates> {
        let len = x.len();
        if len > self.config.max_len {
            return Err(Error::Overlength { len, max_len: self.config.max_len });
        }
        let ids: Vec<usize> = x.token_ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let segments: Vec<usize> = x.segment_types().iter().map(|&s| s as usize).collect();
        self.run(g, &ids, &positions, &segments, &mut dropout)
    }

    fn run(
        &self,
        g: &mut Graph<'_>,
        ids: &[usize],
        positions: &[usize],
        segments: &[usize],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<EncoderStates> {
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let dh = d / heads;
        let (tok, pos, seg) = (g.param(self.tok), g.param(self.pos), g.param(self.seg));
        let e_tok = g.gather_rows(tok, ids);
        let e_pos = g.gather_rows(pos, positions);
        let e_seg = g.gather_rows(seg, segments);
        let mut x = g.add(e_tok, e_pos);
        x = g.add(x, e_seg);
        let mut attention = Vec::new();
        let scale = 1.0 / libm::sqrt(dh as f64);
        for b in &self.blocks {
            let h = b.ln1.forward(g, x);
            let qkv = b.qkv.forward(g, h);
            let mut outs = Vec::with_capacity(heads);
            for k in 0..heads {
                let q = g.slice_cols(qkv, k * dh, dh);
                let kk = g.slice_cols(qkv, d + k * dh, dh);
                let v = g.slice_cols(qkv, 2 * d + k * dh, dh);
                let s = g.matmul_nt(q, kk);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s);
                attention.push(a);
                outs.push(g.matmul(a, v));
            }
            let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let mut o = b.out.forward(g, o);
            if let Some(dr) = dropout.as_deref_mut() {
                o = dr.apply(g, o);
            }
            x = g.add(x, o);
            let h = b.ln2.forward(g, x);
            let f = b.ff1.forward(g, h);
            let f = g.gelu(f);
            let mut f = b.ff2.forward(g, f);
            if let Some(dr) = dropout.as_deref_mut() {
                f = dr.apply(g, f);
            }
            x = g.add(x, f);
        }
        let h = self.ln_f.forward(g, x);
        Ok(EncoderStates { h, attention })
    }

    /// Mean-pooled representation of a token list encoded on its own (the
    /// gold rewrite at training time), `1 x d_model`.
    pub fn encode_rewrite(
        &self,
        g: &mut Graph<'_>,
        tokens: &[alloc::string::String],
        vocab: &Vocab,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySpan { start: 0, end: 0 });
        }
        let x = encode_standalone(tokens, vocab);
        self.encode_standalone(g, &x, dropout)
    }

    pub fn encode_standalone(&self, g: &mut Graph<'_>, x: &EncodedExample, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let len = x.len();
        if len > self.config.max_len {
            return Err(Error::Overlength { len, max_len: self.config.max_len });
        }
        let ids: Vec<usize> = x.token_ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let segments = alloc::vec![1usize; len];
        let st = self.run(g, &ids, &positions, &segments, &mut dropout)?;
        Ok(g.mean_rows(st.h, &[(0, len)]))
    }
}

/// Mean of `h` rows over each span; the last span is the incomplete
/// utterance `u`, the others are the contexts `c` (`n x d`).
pub fn pool_utterances(g: &mut Graph<'_>, h: Var, spans: &[(usize, usize)]) -> Result<(Var, Var)> {
    let rows = g.value(h).rows;
    for &(s, e) in spans {
        if e <= s || e > rows {
            return Err(Error::EmptySpan { start: s, end: e });
        }
    }
    if spans.len() < 2 {
        return Err(Error::DimensionMismatch(format!("need context and incomplete spans, got {}", spans.len())));
    }
    let n = spans.len() - 1;
    let c = g.mean_rows(h, &spans[..n]);
    let u = g.mean_rows(h, &spans[n..]);
    Ok((c, u))
}
