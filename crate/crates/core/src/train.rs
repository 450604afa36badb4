//! Optimizer steps, batch scheduling and finite-difference gradient checks.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads};
use crate::error::Result;
use crate::model::{Model, Prepared};
use crate::objective::LossBreakdown;
use crate::params::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "L_edit")]
    pub l_edit: f64,
    #[serde(rename = "L_sel")]
    pub l_sel: f64,
    #[serde(rename = "L_mat")]
    pub l_mat: f64,
    #[serde(rename = "L_int")]
    pub l_int: f64,
    #[serde(rename = "L_final")]
    pub l_final: f64,
    pub lr: f64,
}

impl StepLog {
    fn new(step: usize, b: &LossBreakdown, lr: f64) -> Self {
        StepLog { step, l_edit: b.l_edit, l_sel: b.l_sel, l_mat: b.l_mat, l_int: b.l_int, l_final: b.l_final, lr }
    }
}

/// Example indices for `step`: consecutive slices of per-epoch permutations
/// seeded by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (0..batch_size.min(n))
        .map(|k| {
            let pos = step * batch_size.min(n) + k;
            let epoch = pos / n;
            if cache.as_ref().is_none_or(|c| c.0 != epoch) {
                cache = Some((epoch, permutation(n, seed, epoch as u64)));
            }
            cache.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}

/// Forward, backward and one Adam update on `batch`.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&Prepared], step: usize) -> Result<StepLog> {
    let (breakdown, grads) = {
        let mut g = Graph::new(&model.params);
        let l = model.batch_losses(&mut g, batch, step as u64, true)?;
        (l.breakdown, g.backward(l.total))
    };
    let lr = adam.update(&mut model.params, &grads);
    Ok(StepLog::new(step, &breakdown, lr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossComponent {
    Edit,
    Sel,
    Mat,
    Int,
    Final,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [Self::Edit, Self::Sel, Self::Mat, Self::Int, Self::Final];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Edit => "L_edit",
            Self::Sel => "L_sel",
            Self::Mat => "L_mat",
            Self::Int => "L_int",
            Self::Final => "L_final",
        }
    }
}

fn component_loss(model: &Model, batch: &[&Prepared], step: u64, which: LossComponent) -> Result<(f64, Option<ParamGrads>)> {
    let mut g = Graph::new(&model.params);
    let l = model.batch_losses(&mut g, batch, step, false)?;
    let v = match which {
        LossComponent::Edit => l.edit,
        LossComponent::Sel => l.sel,
        LossComponent::Mat => l.mat,
        LossComponent::Int => l.int,
        LossComponent::Final => Some(l.total),
    };
    Ok(match v {
        Some(v) => (g.value(v).item(), Some(g.backward(v))),
        None => (0.0, None),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Whether the component was active for this batch at all.
    pub active: bool,
}

/// Central finite differences against the analytic gradient of one loss
/// component. Up to `per_tensor` entries of every parameter tensor are
/// probed (spread evenly). The relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(model: &mut Model, batch: &[&Prepared], which: LossComponent, h: f64, per_tensor: usize, floor: f64) -> Result<GradCheck> {
    let step = 0;
    let (_, grads) = component_loss(model, batch, step, which)?;
    let Some(grads) = grads else { return Ok(GradCheck { max_rel_err: 0.0, checked: 0, active: false }) };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in 0..model.params.len() {
        let len = model.params.get(t).len();
        let count = per_tensor.min(len);
        for s in 0..count {
            let k = s * len / count;
            let analytic = grads.get(t).map_or(0.0, |g| g.data[k]);
            let orig = model.params.get(t).data[k];
            model.params.get_mut(t).data[k] = orig + h;
            let (up, _) = component_loss(model, batch, step, which)?;
            model.params.get_mut(t).data[k] = orig - h;
            let (down, _) = component_loss(model, batch, step, which)?;
            model.params.get_mut(t).data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, checked, active: true })
}
