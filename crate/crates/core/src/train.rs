//! Pieces shared by the training loops: optimizer settings, epoch shuffling,
//! and line-delimited progress records.

use kinalign_tensor::{AdamWConfig, CosineSchedule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            eta_min: 0.0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.eta_min >= 0.0) || (self.lr > 0.0 && self.eta_min > self.lr) {
            return Err(Error::Config(format!(
                "invalid learning rates lr={} eta_min={}",
                self.lr, self.eta_min
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Cosine schedule over every optimizer step of the run, expressed as a
    /// multiplier of the base lr so parameter groups keep their ratios.
    pub fn schedule(&self, steps_per_epoch: usize) -> Result<Option<CosineSchedule>> {
        let total = (self.epochs * steps_per_epoch) as u64;
        if total == 0 || self.lr == 0.0 {
            return Ok(None);
        }
        Ok(Some(CosineSchedule::new(1.0, self.eta_min / self.lr, total)?))
    }
}

pub(crate) fn lr_factor(schedule: &Option<CosineSchedule>, step: u64) -> f64 {
    schedule.as_ref().map_or(1.0, |s| s.lr(step))
}

/// Shuffled batches of indices for one epoch. The last short batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Independent random streams derived from one seed.
pub(crate) fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_DROPOUT: u64 = 3;
pub(crate) const STREAM_MASK: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub mode: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
}

/// Per-epoch summary of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Mean batch diagonal dominance per epoch (alignment only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_dominance: Vec<f64>,
}

pub type Progress<'a> = &'a mut dyn FnMut(&ProgressRecord);

pub(crate) fn warn_small_dataset(n: usize, batch_size: usize) {
    if n < batch_size {
        log::warn!("{n} training items is fewer than batch size {batch_size}; using one smaller batch");
    }
}
