//! Model fusion pruning: fine-tune the global model for one epoch, blend the
//! global model back in with a decaying fusion factor, then prune the blend
//! by channel L1 norm.

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{config, input, Result};
use crate::hyper::HyperParams;
use crate::local::run_epochs;
use crate::masking::{apply_mask, build_mask, channel_l1_scores, ChannelMask};
use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    pub alpha0: f64,
    pub alpha_min: f64,
    pub epsilon: f64,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        FusionSchedule {
            alpha0: 0.9,
            alpha_min: 0.1,
            epsilon: 0.2,
        }
    }
}

impl FusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return config(format!("alpha0 must lie in (0, 1], got {}", self.alpha0));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= self.alpha0) {
            return config(format!(
                "alpha_min must lie in (0, alpha0], got {}",
                self.alpha_min
            ));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return config(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        Ok(())
    }

    /// Fusion factor for 1-indexed round `t`:
    /// `max((1 - epsilon)^(t - 1) * alpha0, alpha_min)`.
    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        if t < 1 {
            return input("round index starts at 1");
        }
        let decayed = (1.0 - self.epsilon).powi((t - 1) as i32) * self.alpha0;
        Ok(decayed.max(self.alpha_min))
    }
}

/// `alpha * global + (1 - alpha) * local` for every parameter. Positions
/// where both models agree are copied unchanged.
pub fn fuse(global: &Network, local: &Network, alpha: f64) -> Result<Network> {
    if !(0.0..=1.0).contains(&alpha) {
        return input(format!("fusion factor must lie in [0, 1], got {alpha}"));
    }
    global.zip_map(local, |g, l| if g == l { g } else { alpha * g + (1.0 - alpha) * l })
}

/// One epoch of plain cross-entropy SGD from a copy of `global`; this is
/// local epoch 1 of the round.
pub fn fine_tune(
    global: &Network,
    data: &DomainDataset,
    cfg: &HyperParams,
    seed: u64,
) -> Result<Network> {
    if data.is_empty() {
        return input("client has no training data");
    }
    let mut net = global.clone();
    run_epochs(&mut net, None, data, cfg, 0.0, 1..=1, seed)?;
    Ok(net)
}

/// Scores `model`, builds the channel mask at ratio `rho` and applies it.
pub fn prune(model: &Network, rho: f64) -> Result<(Network, ChannelMask)> {
    let mask = build_mask(&channel_l1_scores(model), rho)?;
    let pruned = apply_mask(model, &mask)?;
    Ok((pruned, mask))
}

/// Full fusion-pruning step for one client in round `t`.
pub fn model_fusion_pruning(
    global: &Network,
    data: &DomainDataset,
    rho: f64,
    sched: &FusionSchedule,
    t: usize,
    cfg: &HyperParams,
    seed: u64,
) -> Result<(Network, ChannelMask)> {
    let alpha = sched.alpha_at(t)?;
    let tuned = fine_tune(global, data, cfg, seed)?;
    let fused = fuse(global, &tuned, alpha)?;
    prune(&fused, rho)
}
