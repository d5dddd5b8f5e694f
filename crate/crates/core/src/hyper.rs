use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::mfp::FusionSchedule;

/// Training hyperparameters shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Local epochs per round, counting the fine-tune epoch of fusion pruning.
    pub local_epochs: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub fusion: FusionSchedule,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            local_epochs: 5,
            rounds: 100,
            batch_size: 64,
            gamma: 0.01,
            fusion: FusionSchedule::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return config("lr must be a finite nonnegative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config("momentum must lie in [0, 1)");
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return config("weight_decay must be nonnegative");
        }
        if self.local_epochs == 0 {
            return config("local_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return config("gamma must be nonnegative");
        }
        self.fusion.validate()
    }
}
