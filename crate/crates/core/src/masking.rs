//! Channel-level pruning masks.
//!
//! A mask is chosen per output channel and then expanded to every parameter
//! it touches: a dropped channel zeroes its weight row, its bias entry and
//! the matching input columns of the next layer.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;

use crate::error::{config, input, Result};
use crate::nn::{LayerKind, LayerParams, LayerSpec, Network};

/// Keep bits for one layer's parameters, laid out like the weight and bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    pub weight: Vec<bool>,
    pub bias: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    layers: Vec<LayerSpec>,
    keep: Vec<Vec<bool>>,
    params: Vec<ParamMask>,
}

/// Channel-wise L1 scores for every layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScores {
    pub layers: Vec<LayerSpec>,
    pub scores: Vec<Vec<f64>>,
}

/// Retained parameters and per-sample forward FLOPs (2 per multiply-accumulate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Footprint {
    pub param_count: u64,
    pub flops: u64,
}

/// Number of channels dropped out of `channels` at ratio `rho`:
/// `round_half_up(rho * channels)`, leaving at least one channel.
pub fn dropped_count(channels: usize, rho: f64) -> usize {
    let d = (rho * channels as f64 + 0.5).floor() as usize;
    d.min(channels.saturating_sub(1))
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        config(format!("pruning ratio must lie in [0, 1), got {rho}"))
    }
}

/// Keep vector for one layer: the `dropped_count` lowest-scoring channels are
/// removed; equal scores keep the lower channel index.
pub fn select_channels(scores: &[f64], rho: f64) -> Result<Vec<bool>> {
    check_rho(rho)?;
    let drop = dropped_count(scores.len(), rho);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[a].total_cmp(&scores[b]) {
        Ordering::Equal => b.cmp(&a),
        o => o,
    });
    let mut keep = vec![true; scores.len()];
    for &c in &order[..drop] {
        keep[c] = false;
    }
    Ok(keep)
}

/// Sum of absolute weights feeding each output channel (biases excluded).
pub fn channel_l1_scores(net: &Network) -> ChannelScores {
    let scores = net
        .layers()
        .iter()
        .zip(net.params())
        .map(|(spec, p)| {
            let fan = spec.fan_in();
            p.weight
                .data()
                .chunks(fan)
                .map(|row| row.iter().map(|w| w.abs()).sum())
                .collect()
        })
        .collect();
    ChannelScores {
        layers: net.layers().to_vec(),
        scores,
    }
}

/// Prunes every prunable layer at the same ratio by channel score.
pub fn build_mask(scores: &ChannelScores, rho: f64) -> Result<ChannelMask> {
    check_rho(rho)?;
    let keep = scores
        .layers
        .iter()
        .zip(&scores.scores)
        .map(|(spec, s)| {
            if spec.prunable {
                select_channels(s, rho)
            } else {
                Ok(vec![true; spec.out_channels])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ChannelMask::from_keep(&scores.layers, keep)
}

/// Uniformly random channel selection with the same per-layer counts as
/// [`build_mask`].
pub fn random_mask(layers: &[LayerSpec], rho: f64, rng: &mut impl Rng) -> Result<ChannelMask> {
    check_rho(rho)?;
    let keep = layers
        .iter()
        .map(|spec| {
            let c = spec.out_channels;
            let mut keep = vec![true; c];
            if spec.prunable {
                for i in index::sample(rng, c, dropped_count(c, rho)) {
                    keep[i] = false;
                }
            }
            keep
        })
        .collect();
    ChannelMask::from_keep(layers, keep)
}

impl ChannelMask {
    /// Expands per-layer keep vectors into parameter-level bits.
    pub fn from_keep(layers: &[LayerSpec], keep: Vec<Vec<bool>>) -> Result<Self> {
        if keep.len() != layers.len() {
            return input("keep vectors do not match layer count");
        }
        for (k, (spec, kv)) in layers.iter().zip(&keep).enumerate() {
            if kv.len() != spec.out_channels {
                return input(format!("layer {k}: keep vector has wrong length"));
            }
            if !spec.prunable && kv.iter().any(|&b| !b) {
                return input(format!("layer {k} is not prunable"));
            }
        }
        let params = layers
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let area = match spec.kind {
                    LayerKind::Dense => 1,
                    LayerKind::Conv2d { kernel } => kernel * kernel,
                };
                let mut weight = Vec::with_capacity(spec.out_channels * spec.fan_in());
                for o in 0..spec.out_channels {
                    for i in 0..spec.in_channels {
                        let bit = keep[k][o] && (k == 0 || keep[k - 1][i]);
                        weight.extend(std::iter::repeat_n(bit, area));
                    }
                }
                ParamMask {
                    weight,
                    bias: keep[k].clone(),
                }
            })
            .collect();
        Ok(ChannelMask {
            layers: layers.to_vec(),
            keep,
            params,
        })
    }

    /// Mask that keeps everything.
    pub fn full(layers: &[LayerSpec]) -> Self {
        let keep = layers.iter().map(|s| vec![true; s.out_channels]).collect();
        Self::from_keep(layers, keep).expect("full keep vectors are always valid")
    }

    /// Mask from raw parameter bits, bypassing the channel structure. Used
    /// for synthetic masks; the keep vectors mirror the bias bits.
    pub fn from_param_masks(layers: &[LayerSpec], params: Vec<ParamMask>) -> Result<Self> {
        if params.len() != layers.len() {
            return input("parameter masks do not match layer count");
        }
        for (spec, p) in layers.iter().zip(&params) {
            if p.weight.len() != spec.out_channels * spec.fan_in()
                || p.bias.len() != spec.out_channels
            {
                return input("parameter mask has wrong size");
            }
        }
        Ok(ChannelMask {
            layers: layers.to_vec(),
            keep: params.iter().map(|p| p.bias.clone()).collect(),
            params,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn keep(&self) -> &[Vec<bool>] {
        &self.keep
    }

    pub fn param_masks(&self) -> &[ParamMask] {
        &self.params
    }

    pub fn kept_channels(&self, layer: usize) -> usize {
        self.keep[layer].iter().filter(|&&b| b).count()
    }

    /// Logical NOT of every parameter bit.
    pub fn complement(&self) -> ChannelMask {
        let not = |v: &Vec<bool>| v.iter().map(|b| !b).collect::<Vec<_>>();
        ChannelMask {
            layers: self.layers.clone(),
            keep: self.keep.iter().map(not).collect(),
            params: self
                .params
                .iter()
                .map(|p| ParamMask {
                    weight: not(&p.weight),
                    bias: not(&p.bias),
                })
                .collect(),
        }
    }

    pub fn is_all_ones(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.weight.iter().chain(&p.bias).all(|&b| b))
    }

    fn check(&self, layers: &[LayerSpec]) -> Result<()> {
        if self.layers == layers {
            Ok(())
        } else {
            input("mask does not match network structure")
        }
    }

    /// Sets every masked entry of a parameter-shaped list to zero.
    pub(crate) fn zero_masked(&self, params: &mut [LayerParams]) -> Result<()> {
        if params.len() != self.params.len() {
            return input("mask does not match parameter layout");
        }
        for (p, m) in params.iter_mut().zip(&self.params) {
            if p.weight.len() != m.weight.len() || p.bias.len() != m.bias.len() {
                return input("mask does not match parameter layout");
            }
            for (v, &b) in p.weight.data_mut().iter_mut().zip(&m.weight) {
                if !b {
                    *v = 0.0;
                }
            }
            for (v, &b) in p.bias.data_mut().iter_mut().zip(&m.bias) {
                if !b {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// True when every masked parameter of `net` is exactly zero.
    pub fn is_satisfied_by(&self, net: &Network) -> Result<bool> {
        self.check(net.layers())?;
        Ok(net.params().iter().zip(&self.params).all(|(p, m)| {
            let w = p.weight.data().iter().zip(&m.weight);
            let b = p.bias.data().iter().zip(&m.bias);
            w.chain(b).all(|(&v, &bit)| bit || v == 0.0)
        }))
    }
}

/// `w ⊙ M`: masked entries set to zero, the rest unchanged.
pub fn apply_mask(net: &Network, mask: &ChannelMask) -> Result<Network> {
    mask.check(net.layers())?;
    let mut out = net.clone();
    mask.zero_masked(out.params_mut())?;
    Ok(out)
}

/// `pruned ⊙ M + global ⊙ (1 - M)`, realized as an exact per-entry select.
pub fn recover(pruned: &Network, mask: &ChannelMask, global: &Network) -> Result<Network> {
    mask.check(pruned.layers())?;
    pruned.check_structure(global)?;
    let mut out = pruned.clone();
    for ((p, g), m) in out.params_mut().iter_mut().zip(global.params()).zip(&mask.params) {
        for ((v, &gv), &b) in p.weight.data_mut().iter_mut().zip(g.weight.data()).zip(&m.weight) {
            if !b {
                *v = gv;
            }
        }
        for ((v, &gv), &b) in p.bias.data_mut().iter_mut().zip(g.bias.data()).zip(&m.bias) {
            if !b {
                *v = gv;
            }
        }
    }
    Ok(out)
}

/// Retained parameters and FLOPs of `net` under an optional mask.
pub fn count_footprint(net: &Network, mask: Option<&ChannelMask>) -> Result<Footprint> {
    if let Some(m) = mask {
        m.check(net.layers())?;
    }
    let (h, w) = net.input_hw();
    let mut fp = Footprint::default();
    for (k, spec) in net.layers().iter().enumerate() {
        let (weights, biases) = match mask {
            Some(m) => {
                let pm = &m.params[k];
                (
                    pm.weight.iter().filter(|&&b| b).count(),
                    pm.bias.iter().filter(|&&b| b).count(),
                )
            }
            None => (spec.out_channels * spec.fan_in(), spec.out_channels),
        };
        let positions = match spec.kind {
            LayerKind::Dense => 1,
            LayerKind::Conv2d { .. } => h * w,
        };
        fp.param_count += (weights + biases) as u64;
        fp.flops += 2 * (weights * positions) as u64;
    }
    Ok(fp)
}
