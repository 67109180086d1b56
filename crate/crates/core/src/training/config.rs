use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Which regularizer is active during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerKind {
    /// Decoupled weight decay with strength `TrainConfig::weight_decay`.
    WeightDecay,
    /// Dropout on MLP activations; weight decay off.
    Dropout { p: f64 },
    /// L1 penalty added to the loss; weight decay off.
    L1 { lambda: f64 },
    None,
}

/// Epochs at which checkpoints are written: every `dense_every` epochs
/// below `dense_until`, every `sparse_every` after, plus the final epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSchedule {
    pub dense_every: u64,
    pub dense_until: u64,
    pub sparse_every: u64,
}

impl Default for CheckpointSchedule {
    fn default() -> Self {
        Self {
            dense_every: 10,
            dense_until: 1000,
            sparse_every: 100,
        }
    }
}

impl CheckpointSchedule {
    pub fn contains(&self, epoch: u64, final_epoch: u64) -> bool {
        if epoch == final_epoch {
            return true;
        }
        if epoch < self.dense_until {
            epoch % self.dense_every == 0
        } else {
            epoch % self.sparse_every == 0
        }
    }

    pub fn epochs(&self, final_epoch: u64) -> Vec<u64> {
        (0..=final_epoch).filter(|&e| self.contains(e, final_epoch)).collect()
    }
}

fn d_lr() -> f64 {
    1e-3
}
fn d_wd() -> f64 {
    1.0
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-8
}
fn d_epochs() -> u64 {
    40_000
}
fn d_frac() -> f64 {
    0.3
}
fn d_reg() -> RegularizerKind {
    RegularizerKind::WeightDecay
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_epochs")]
    pub epochs: u64,
    #[serde(default = "d_frac")]
    pub train_frac: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_reg")]
    pub regularizer: RegularizerKind,
    #[serde(default)]
    pub checkpoints: CheckpointSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: d_lr(),
            weight_decay: d_wd(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            epochs: d_epochs(),
            train_frac: d_frac(),
            seed: 0,
            regularizer: d_reg(),
            checkpoints: CheckpointSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Argument(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad(format!("train fraction must lie in (0, 1), got {}", self.train_frac));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        match self.regularizer {
            RegularizerKind::Dropout { p } if !(0.0..1.0).contains(&p) => {
                return bad(format!("dropout probability must lie in [0, 1), got {p}"));
            }
            RegularizerKind::L1 { lambda } if !(lambda >= 0.0) => {
                return bad(format!("l1 strength must be nonnegative, got {lambda}"));
            }
            _ => {}
        }
        let s = &self.checkpoints;
        if s.dense_every == 0 || s.sparse_every == 0 {
            return bad("checkpoint intervals must be positive".into());
        }
        Ok(())
    }

    /// Optimizer settings; decay is only active under the weight-decay regularizer.
    pub fn adamw(&self) -> AdamW {
        let weight_decay = match self.regularizer {
            RegularizerKind::WeightDecay => self.weight_decay,
            _ => 0.0,
        };
        AdamW {
            lr: self.lr,
            weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
