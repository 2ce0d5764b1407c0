//! Configuration and bookkeeping shared by the gradient-based learners.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Plain constant-rate (mini-batch) SGD.
    Sgd,
    /// Adaptive moment estimation. Only used by the neural learners.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate.
    pub eta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Fraction of rows held out for early stopping. With 0 every row is used
    /// for training and early stopping tracks the training loss.
    pub val_fraction: f64,
    pub patience: usize,
    /// Minimum decrease of the validation loss that counts as an improvement.
    pub tolerance: f64,
    /// Training stops once the validation loss drops below this value.
    pub baseline: f64,
    /// L2 coefficient; 0 disables the penalty. The intercept is never penalised.
    pub lambda: f64,
    pub seed: u64,
    /// Shuffle rows before the train/validation split.
    pub shuffle: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.01,
            batch_size: 64,
            max_epochs: 500,
            val_fraction: 0.25,
            patience: 30,
            tolerance: 1e-7,
            baseline: 1e-6,
            lambda: 0.0,
            seed: 123,
            shuffle: true,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.batch_size > n_train {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the training partition ({n_train} rows)",
                self.batch_size
            )));
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Baseline,
}

/// Per-epoch record of a gradient-based fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were returned; 0 means the initial point.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Wall-clock seconds spent inside the fit call.
    pub fit_seconds: f64,
}

impl TrainTrace {
    pub fn empty() -> Self {
        TrainTrace {
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            best_epoch: 0,
            stop_reason: StopReason::MaxEpochs,
            fit_seconds: 0.0,
        }
    }

    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Row indices of the training and validation partitions plus the fixed
/// mini-batch order over the training partition.
pub(crate) struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub(crate) fn partition(n: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Partition {
    let mut idx: Vec<usize> = (0..n).collect();
    if config.shuffle {
        idx.shuffle(rng);
    }
    if n < 2 || config.val_fraction == 0.0 {
        return Partition {
            train: idx.clone(),
            val: idx,
        };
    }
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Partition { train: idx, val }
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tracks the best validation loss and decides when to stop.
pub(crate) struct EarlyStopping {
    best: f64,
    wait: usize,
    patience: usize,
    tolerance: f64,
    baseline: f64,
}

pub(crate) enum Verdict {
    Improved,
    Continue,
    Stop(StopReason),
    ImprovedAndStop(StopReason),
}

impl EarlyStopping {
    pub fn new(config: &TrainConfig, initial: f64) -> Self {
        EarlyStopping {
            best: initial,
            wait: 0,
            patience: config.patience,
            tolerance: config.tolerance,
            baseline: config.baseline,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        let improved = val_loss < self.best - self.tolerance;
        if improved {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        let stop = if val_loss < self.baseline {
            Some(StopReason::Baseline)
        } else if self.wait >= self.patience && self.patience > 0 {
            Some(StopReason::Patience)
        } else {
            None
        };
        match (improved, stop) {
            (true, None) => Verdict::Improved,
            (true, Some(r)) => Verdict::ImprovedAndStop(r),
            (false, None) => Verdict::Continue,
            (false, Some(r)) => Verdict::Stop(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_sizes() {
        let config = TrainConfig::default();
        let p = partition(100, &config, &mut rng_for(1));
        assert_eq!((p.train.len(), p.val.len()), (75, 25));
        let mut all: Vec<usize> = p.train.iter().chain(&p.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn zero_fraction_trains_on_everything() {
        let config = TrainConfig {
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        config.validate(100).unwrap();
        let p = partition(100, &config, &mut rng_for(1));
        assert_eq!(p.train.len(), 100);
        assert_eq!(p.train, p.val);
        let bad = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate(100).is_err());
    }
}
