//! Named parameter tensors, seeded initialization and the Adam optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Deterministic initializer: ChaCha8 stream, Box-Muller normals.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform01(&mut self) -> f64 {
        // 53 random mantissa bits, in (0, 1)
        ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform01();
        let u2 = self.uniform01();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.normal() * std).collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Glorot-scaled normal weights for a `fan_in x fan_out` matrix.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let std = libm::sqrt(2.0 / (fan_in + fan_out) as f64);
        self.normal_tensor(fan_in, fan_out, std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup: 100, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Constant rate after a linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.config.warmup == 0 || step >= self.config.warmup {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / self.config.warmup as f64
        }
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> f64 {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let sq: f64 = grads.grads.iter().flatten().flat_map(|t| t.data.iter()).map(|g| g * g).sum();
            let norm = libm::sqrt(sq);
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut params.tensors[i];
            for k in 0..p.data.len() {
                let gk = g.data[k] * scale;
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        lr
    }
}
