use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation metric used to pick the best epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOn {
    Accuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Peak learning rate after warmup.
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    pub select_on: SelectOn,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 0.0035,
            warmup_epochs: 1,
            warmup_lr: 1e-5,
            epochs: 100,
            momentum: 0.9,
            seed: 0,
            select_on: SelectOn::Accuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs ({}) must be smaller than train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("train.{name} must be a non-negative number")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Constant `warmup_lr` for the warmup epochs, then cosine decay from `lr`
/// at the first post-warmup step to 0 at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warm = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.epochs * steps_per_epoch;
    if step < warm {
        return cfg.warmup_lr;
    }
    if step >= total {
        return 0.0;
    }
    let span = total - warm;
    if span <= 1 {
        return cfg.lr;
    }
    let t = (step - warm) as f64 / (span - 1) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
