//! Minibatch training with Adam, KL warm-up and deterministic noise.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sfgs_core::rng::CounterRng;

use crate::adam::{Adam, AdamConfig};
use crate::error::{Result, VaeError};
use crate::latent::standard_normal;
use crate::model::{LossRecord, TrainItem, VaeModel};
use crate::recon::ReconConfig;

const NOISE_PURPOSE: u64 = 0x7e57;
const SHUFFLE_PURPOSE: u64 = 0x5f1e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Final KL weight.
    pub beta_kl: f64,
    /// Fraction of all steps over which the KL weight ramps linearly from 0.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub recon: ReconConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            beta_kl: 1e-3,
            warmup_fraction: 0.1,
            seed: 0,
            recon: ReconConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied(StepRecord),
    /// Non-finite loss; the update was dropped and the learning rate halved.
    Skipped { step: u64, lr: f64 },
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: VaeModel,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Steps attempted so far, including skipped ones.
    pub step: u64,
    pub total_steps: u64,
    pub lr_halved: bool,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(model: VaeModel, config: TrainConfig, train_len: usize) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(VaeError::Config("batch_size must be positive".into()));
        }
        if !(config.adam.lr >= 0.0) {
            return Err(VaeError::Config("learning rate must be non-negative".into()));
        }
        let per_epoch = train_len.div_ceil(config.batch_size) as u64;
        let adam = Adam::new(config.adam, &model.shapes());
        Ok(Self { model, adam, config, step: 0, total_steps: per_epoch * config.epochs as u64, lr_halved: false, history: Vec::new() })
    }

    pub fn beta_at(&self, step: u64) -> f64 {
        let warm = (self.config.warmup_fraction * self.total_steps as f64).max(0.0);
        if warm < 1.0 {
            return self.config.beta_kl;
        }
        self.config.beta_kl * ((step + 1) as f64 / warm).min(1.0)
    }

    /// Reparameterization noise for a step, `B × D`.
    pub fn step_noise(&self, step: u64, batch: usize) -> Array2<f64> {
        let d = self.model.latent_dim();
        let mut rng = CounterRng::derived(self.config.seed, step, NOISE_PURPOSE);
        let mut eps = Array2::zeros((batch, d));
        for mut row in eps.rows_mut() {
            row.assign(&standard_normal(&mut rng, d));
        }
        eps
    }

    pub fn train_step(&mut self, batch: &[&TrainItem], epoch: usize) -> Result<StepOutcome> {
        let step = self.step;
        let eps = self.step_noise(step, batch.len());
        let beta = self.beta_at(step);
        self.step += 1;
        let (loss, grads) = self.model.loss_and_grad(batch, &eps, beta, &self.config.recon)?;
        let finite = loss.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            if self.lr_halved {
                return Err(VaeError::NonFinite { step });
            }
            self.lr_halved = true;
            self.adam.config.lr *= 0.5;
            return Ok(StepOutcome::Skipped { step, lr: self.adam.config.lr });
        }
        self.adam.update(self.model.tensors_mut(), &grads);
        let record = StepRecord { epoch, step, lr: self.adam.config.lr, loss };
        self.history.push(record);
        Ok(StepOutcome::Applied(record))
    }

    /// Deterministic permutation of `0..len` for an epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut CounterRng::derived(self.config.seed, epoch as u64, SHUFFLE_PURPOSE));
        order
    }

    pub fn run_epoch(&mut self, items: &[TrainItem], epoch: usize) -> Result<EpochRecord> {
        let order = self.epoch_order(epoch, items.len());
        let (mut steps, mut skipped) = (0, 0);
        let (mut loss, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            match self.train_step(&batch, epoch)? {
                StepOutcome::Applied(r) => {
                    steps += 1;
                    loss += r.loss.loss;
                    recon += r.loss.recon;
                    kl += r.loss.kl;
                }
                StepOutcome::Skipped { .. } => skipped += 1,
            }
        }
        let n = steps.max(1) as f64;
        Ok(EpochRecord { epoch, steps, skipped, loss: loss / n, recon: recon / n, kl: kl / n })
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
