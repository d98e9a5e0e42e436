use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, loss_and_grad, predict, bce, AdamState, EmbeddingSequence, HeadGrads, HeadParams, DEFAULT_HIDDEN_UNITS};
use crate::error::{Error, Result};

/// Which parameters `train` hands back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    BestTune,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub seed: u64,
    pub decision_threshold: f64,
    pub hidden_units: usize,
    pub checkpoint: Checkpoint,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 1,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            seed: 0,
            decision_threshold: 0.5,
            hidden_units: DEFAULT_HIDDEN_UNITS,
            checkpoint: Checkpoint::BestTune,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_units == 0 {
            return bad("epochs, batch_size and hidden_units must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1], got {}", self.plateau_factor));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 || self.plateau_min_delta < 0.0 {
            return bad("weight_decay and plateau_min_delta must be >= 0, adam_eps > 0".into());
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate once the monitored loss has not
/// improved by more than `min_delta` for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Self {
        PlateauScheduler { factor, patience, min_delta, best: f64::INFINITY, stale: 0 }
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub tune_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epochs after which the learning rate was reduced.
    pub lr_reductions: Vec<usize>,
}

fn mean_loss(params: &HeadParams, set: &[EmbeddingSequence]) -> Result<f64> {
    let mut total = 0.0;
    for e in set {
        total += bce(predict(params, e)?, e.label);
    }
    Ok(total / set.len() as f64)
}

/// Fits a head on `train_set`, monitoring `tune_set` for the learning-rate
/// schedule and checkpoint selection. Deterministic in `(data, cfg)`.
pub fn train(train_set: &[EmbeddingSequence], tune_set: &[EmbeddingSequence], cfg: &TrainConfig) -> Result<(HeadParams, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || tune_set.is_empty() {
        return Err(Error::InvalidConfig("train and tune sets must be nonempty".into()));
    }
    if !(train_set.iter().any(|e| e.label == 0) && train_set.iter().any(|e| e.label == 1)) {
        return Err(Error::SingleClass);
    }
    let dim = train_set[0].dim();
    if let Some(e) = train_set.iter().chain(tune_set).find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch(format!("patient {} has d = {}, expected {dim}", e.patient_id, e.dim())));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut params = HeadParams::kaiming_uniform(cfg.hidden_units, dim, &mut init_rng);
    let mut state = AdamState::new(params.num_params());
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);
    let mut lr = cfg.lr;
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = HeadGrads::zeros_like(&params);
            for &i in batch {
                let e = &train_set[i];
                let (loss, g) = loss_and_grad(&params, e, e.label)?;
                epoch_loss += loss;
                acc.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            adam_step(&mut state, &mut params, &acc, lr, cfg);
        }
        let tune_loss = mean_loss(&params, tune_set)?;
        history.epochs.push(EpochRecord { epoch, train_loss: epoch_loss / train_set.len() as f64, tune_loss, lr });
        if tune_loss < best.0 {
            best = (tune_loss, params.clone());
            history.best_epoch = epoch;
        }
        let next = sched.step(tune_loss, lr);
        if next != lr {
            history.lr_reductions.push(epoch);
        }
        lr = next;
    }
    let out = match cfg.checkpoint {
        Checkpoint::BestTune => best.1,
        Checkpoint::Last => params,
    };
    Ok((out, history))
}
