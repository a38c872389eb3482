//! The epoch loop: sample, augment, forward, loss, backward, Adam, schedule.
//!
//! Each epoch draws from its own ChaCha8 stream (`seed`, stream = epoch), so
//! resuming from a checkpoint replays exactly what an uninterrupted run does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::Checkpoint;
use crate::config::NetConfig;
use crate::error::{NetError, Result};
use crate::loss::LossWeights;
use crate::model::{build_model, NetModel};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::sampling::{sample_patch, TrainCase};
use crate::schedule::{lr_update, LRState, ScheduleParams};

/// Redraws allowed for a batch that happens to contain only ignore labels.
const MAX_BATCH_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Total epochs, counted from the start of training (also when resuming).
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub lr_min_improvement: f64,
    pub ema_alpha: f64,
    pub fg_oversample: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 3e-4,
            batch_size: 2,
            batches_per_epoch: 250,
            epochs: 1000,
            lr_decay_factor: 5.0,
            lr_patience_epochs: 30,
            lr_min_improvement: 5e-3,
            ema_alpha: 0.9,
            fg_oversample: 0.33,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(NetError::Config(m.into()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return err("initial_lr must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.lr_patience_epochs == 0 {
            return err("batch_size, batches_per_epoch and lr_patience_epochs must be positive");
        }
        if !(self.lr_decay_factor > 1.0) {
            return err("lr_decay_factor must exceed 1");
        }
        if !(self.lr_min_improvement >= 0.0) {
            return err("lr_min_improvement must be non-negative");
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return err("ema_alpha must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.fg_oversample) {
            return err("fg_oversample must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return err("adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            ema_alpha: self.ema_alpha,
            decay_factor: self.lr_decay_factor,
            patience_epochs: self.lr_patience_epochs,
            min_improvement: self.lr_min_improvement,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub ema: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

pub struct TrainRequest<'a> {
    pub cases: &'a [TrainCase],
    pub net: &'a NetConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    /// Classes averaged by the dice term.
    pub foreground: &'a [u8],
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Snapshot at the lowest loss EMA reached during this run, if any epoch ran.
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochRecord>,
}

fn check_data(req: &TrainRequest) -> Result<()> {
    if req.cases.is_empty() {
        return Err(NetError::Degenerate("no training cases".into()));
    }
    if !req.cases.iter().any(TrainCase::is_supervised) {
        return Err(NetError::Degenerate("every training voxel is ignored".into()));
    }
    for c in req.cases {
        if c.image.c != req.net.in_channels {
            return Err(NetError::Shape(format!(
                "case {} has {} channels, network expects {}",
                c.id, c.image.c, req.net.in_channels
            )));
        }
        if let Some(&l) = c.labels.iter().find(|&&l| l != 255 && l as usize >= req.net.num_classes) {
            return Err(NetError::Shape(format!(
                "case {} carries label {l} but the network has {} classes",
                c.id, req.net.num_classes
            )));
        }
    }
    Ok(())
}

/// Generator for one epoch's random numbers.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

pub fn train(req: TrainRequest, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    req.net.validate()?;
    req.train.validate()?;
    req.augment.validate()?;
    check_data(&req)?;
    let tc = req.train;
    let (mut model, mut adam, mut lr, start) = match req.resume {
        Some(ck) => {
            if ck.model.cfg != *req.net {
                return Err(NetError::Checkpoint("checkpoint network configuration differs from the requested one".into()));
            }
            let n = ck.model.params.len();
            let lr = ck.lr_state.unwrap_or_else(|| LRState::new(tc.initial_lr));
            (ck.model, ck.adam.unwrap_or_else(|| AdamState::new(n)), lr, ck.epoch)
        }
        None => {
            let m = build_model(req.net, tc.seed)?;
            let n = m.params.len();
            (m, AdamState::new(n), LRState::new(tc.initial_lr), 0)
        }
    };
    let schedule = tc.schedule();
    let hp = tc.adam();
    let patch = req.net.patch_size;
    let mut best: Option<Checkpoint> = None;
    let mut best_ema = lr.ema.iter().copied().fold(f64::INFINITY, f64::min);
    let mut log = Vec::new();
    let snapshot = |model: &NetModel, epoch: usize, adam: &AdamState, lr: &LRState| Checkpoint {
        model: model.clone(),
        epoch,
        lr_state: Some(lr.clone()),
        adam: Some(adam.clone()),
        preprocess_fingerprint: None,
        config_fingerprint: None,
    };

    for epoch in start..tc.epochs {
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut total = 0.0;
        for _ in 0..tc.batches_per_epoch {
            let mut redraws = 0;
            let (images, labels) = loop {
                let mut images = Vec::with_capacity(tc.batch_size);
                let mut labels = Vec::with_capacity(tc.batch_size);
                for _ in 0..tc.batch_size {
                    let case = &req.cases[rand::Rng::random_range(&mut rng, 0..req.cases.len())];
                    let p = augment(sample_patch(case, patch, tc.fg_oversample, &mut rng), req.augment, &mut rng);
                    images.push(p.image);
                    labels.push(p.labels);
                }
                if labels.iter().flatten().any(|&l| l != 255) {
                    break (images, labels);
                }
                redraws += 1;
                if redraws > MAX_BATCH_REDRAWS {
                    return Err(NetError::Degenerate(format!(
                        "no labelled voxel in {MAX_BATCH_REDRAWS} consecutive sampled batches"
                    )));
                }
            };
            let g = model.gradients(&images, &labels, req.foreground, LossWeights::default())?;
            adam_step(&mut model.params, &g.grads, &mut adam, lr.current_lr, &hp)?;
            total += g.loss.total;
        }
        let mean_loss = total / tc.batches_per_epoch as f64;
        let used_lr = lr.current_lr;
        lr = lr_update(&lr, mean_loss, &schedule)?;
        let ema = *lr.ema.last().expect("just pushed");
        let rec = EpochRecord {
            epoch,
            mean_loss,
            ema,
            lr: used_lr,
        };
        on_epoch(&rec);
        log.push(rec);
        if ema < best_ema {
            best_ema = ema;
            best = Some(snapshot(&model, epoch + 1, &adam, &lr));
        }
    }
    model.check_finite()?;
    let last = snapshot(&model, start.max(tc.epochs), &adam, &lr);
    Ok(TrainOutcome { last, best, log })
}
