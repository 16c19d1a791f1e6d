//! Optimisation of the network on labelled volumes.

mod checkpoint;
mod data;
mod fit;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, load_model, load_store, save_checkpoint, save_store, RunConfigFile};
pub use data::{argmax_labels, flip_sample, predict_mask, zscore, Dataset, Sample};
pub use fit::{fit, train_step, EpochRecord, FitOutput, StepRecord};
pub use loss::{seg_loss, seg_loss_value, LossWeights, DICE_SMOOTH};
pub use optim::{AdamW, AdamWConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub first_moment_decay: f64,
    pub second_moment_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Probability of flipping each spatial axis of a training sample.
    pub flip_prob: [f64; 3],
    /// Share of the train split held out when the manifest has no val split.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            base_lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            weight_decay: 1e-4,
            first_moment_decay: 0.9,
            second_moment_decay: 0.999,
            eps: 1e-8,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            flip_prob: [0.5; 3],
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("lr_decay_factor must lie in (0, 1)");
        }
        if self.lr_decay_every == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs, lr_decay_every and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.first_moment_decay) || !(0.0..1.0).contains(&self.second_moment_decay) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be nonnegative and eps positive");
        }
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        let w = self.loss_weights;
        if w.dice < 0.0 || w.ce < 0.0 || w.dice + w.ce == 0.0 {
            return bad("loss weights must be nonnegative and not both zero");
        }
        Ok(())
    }
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamWConfig {
            beta1: c.first_moment_decay,
            beta2: c.second_moment_decay,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Step-decayed learning rate `base_lr * factor^floor(epoch / every)`, rounded
/// to 15 significant digits so decade steps land on the decimal values.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} is outside 0..{}", cfg.epochs)));
    }
    let k = (epoch / cfg.lr_decay_every) as i32;
    let raw = cfg.base_lr * cfg.lr_decay_factor.powi(k);
    Ok(format!("{raw:.14e}").parse().expect("formatted float parses"))
}

/// Best validation score seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_dice: Option<f64>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimiser steps taken.
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub best: Option<BestRecord>,
    /// Seed of every data-order and augmentation stream.
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(cfg.into(), &params);
        TrainState {
            epoch: 0,
            step: 0,
            params,
            optimizer,
            best: None,
            seed: cfg.seed,
        }
    }
}
