//! Server-side round orchestration: pruning-ratio assignment, per-client
//! local updates, structure recovery and sample-weighted aggregation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{config, input, Result};
use crate::hyper::HyperParams;
use crate::local::{run_epochs, train_local};
use crate::masking::{apply_mask, count_footprint, random_mask, recover, ChannelMask, Footprint};
use crate::mfp::{fine_tune, model_fusion_pruning, prune};
use crate::nn::{evaluate, representation_norm, Network};
use crate::seed::{self, derive_seed, tag};

/// Pruning ratio for capability levels 1..=5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LevelTable(pub Vec<f64>);

impl Default for LevelTable {
    fn default() -> Self {
        LevelTable(vec![0.0, 0.2, 0.4, 0.6, 0.8])
    }
}

impl LevelTable {
    pub const LEVELS: usize = 5;

    pub fn uniform(rho: f64) -> Self {
        LevelTable(vec![rho; Self::LEVELS])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != Self::LEVELS {
            return config(format!("level table needs {} entries", Self::LEVELS));
        }
        if let Some(r) = self.0.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return config(format!("pruning ratio {r} outside [0, 1)"));
        }
        Ok(())
    }

    pub fn rho(&self, level: usize) -> Result<f64> {
        if !(1..=Self::LEVELS).contains(&level) {
            return config(format!("capability level {level} outside 1..=5"));
        }
        Ok(self.0[level - 1])
    }

    pub fn max_rho(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub id: usize,
    pub level: usize,
    pub rho: f64,
    pub dataset: DomainDataset,
    pub sample_count: usize,
    pub seed: u64,
}

impl ClientProfile {
    pub fn new(id: usize, level: usize, dataset: DomainDataset, seed: u64) -> Self {
        ClientProfile {
            id,
            level,
            rho: 0.0,
            sample_count: dataset.len(),
            dataset,
            seed,
        }
    }
}

/// Sets each client's pruning ratio from its capability level.
pub fn assign_ratios(clients: &mut [ClientProfile], table: &LevelTable) -> Result<()> {
    table.validate()?;
    for c in clients.iter_mut() {
        c.rho = table.rho(c.level)?;
    }
    Ok(())
}

/// How a client turns the broadcast global model into its local update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalUpdate {
    /// Fine-tune, fuse with the global model, prune by L1, train the rest.
    FusionPruning,
    /// Fine-tune and prune the fine-tuned model directly, without fusion.
    UnfusedPruning,
    /// No pruning and no fusion: every local epoch trains the full model.
    Dense,
    /// Random channel mask on the global model, all epochs on the sub-model.
    RandomDrop,
}

impl LocalUpdate {
    pub fn uses_fusion(self) -> bool {
        self == LocalUpdate::FusionPruning
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub hyper: HyperParams,
    pub update: LocalUpdate,
    /// Run client updates on the rayon pool instead of in a plain loop.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Fusion factor used this round (0 when the update does not fuse).
    pub alpha: f64,
    pub footprints: Vec<Footprint>,
    pub domain_accuracy: Vec<f64>,
    pub global_accuracy: f64,
    pub wall_ms: u128,
}

/// Everything a client sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub model: Network,
    pub mask: ChannelMask,
    pub footprint: Footprint,
}

/// Seed of client `client_seed` in round `t`.
pub fn round_seed(client_seed: u64, t: usize) -> u64 {
    derive_seed(client_seed, &[t as u64])
}

/// Runs one client's local update for round `t`.
pub fn client_update(
    global: &Network,
    client: &ClientProfile,
    t: usize,
    cfg: &RoundConfig,
) -> Result<ClientUpdate> {
    let hp = &cfg.hyper;
    let data = &client.dataset;
    let seed = round_seed(client.seed, t);
    let (model, mask) = match cfg.update {
        LocalUpdate::FusionPruning => {
            let (pruned, mask) =
                model_fusion_pruning(global, data, client.rho, &hp.fusion, t, hp, seed)?;
            (train_local(&pruned, &mask, data, hp, seed)?, mask)
        }
        LocalUpdate::UnfusedPruning => {
            let tuned = fine_tune(global, data, hp, seed)?;
            let (pruned, mask) = prune(&tuned, client.rho)?;
            (train_local(&pruned, &mask, data, hp, seed)?, mask)
        }
        LocalUpdate::Dense => {
            let tuned = fine_tune(global, data, hp, seed)?;
            let mask = ChannelMask::full(global.layers());
            (train_local(&tuned, &mask, data, hp, seed)?, mask)
        }
        LocalUpdate::RandomDrop => {
            if data.is_empty() {
                return input("client has no training data");
            }
            let mut rng = seed::rng(derive_seed(seed, &[tag::DROP_MASK]));
            let mask = random_mask(global.layers(), client.rho, &mut rng)?;
            let mut net = apply_mask(global, &mask)?;
            run_epochs(&mut net, Some(&mask), data, hp, hp.gamma, 1..=hp.local_epochs, seed)?;
            (net, mask)
        }
    };
    let footprint = count_footprint(&model, Some(&mask))?;
    Ok(ClientUpdate {
        model,
        mask,
        footprint,
    })
}

/// Fills every pruned position of each local model from `global_prev`.
pub fn recover_all(locals: &[(Network, ChannelMask)], global_prev: &Network) -> Result<Vec<Network>> {
    locals
        .iter()
        .map(|(net, mask)| recover(net, mask, global_prev))
        .collect()
}

/// Sample-weighted average `sum_i (n_i / n) * w_i`, accumulated in list order.
///
/// Each result is projected onto the clients' `[min, max]` at that position,
/// which only removes last-bit rounding overshoot and makes averaging
/// identical values exact.
pub fn aggregate(recovered: &[Network], sample_counts: &[usize]) -> Result<Network> {
    let Some(first) = recovered.first() else {
        return input("nothing to aggregate");
    };
    if sample_counts.len() != recovered.len() {
        return input("one sample count per model is required");
    }
    if sample_counts.contains(&0) {
        return input("sample counts must be positive");
    }
    for net in &recovered[1..] {
        first.check_structure(net)?;
    }
    let total: usize = sample_counts.iter().sum();
    let weights: Vec<f64> = sample_counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect();
    let mut out = first.clone();
    for (k, layer) in out.params_mut().iter_mut().enumerate() {
        for (which, tensor) in [&mut layer.weight, &mut layer.bias].into_iter().enumerate() {
            for (pos, slot) in tensor.data_mut().iter_mut().enumerate() {
                let mut acc = 0.0;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (net, &w) in recovered.iter().zip(&weights) {
                    let p = &net.params()[k];
                    let v = if which == 0 { p.weight.data()[pos] } else { p.bias.data()[pos] };
                    acc += w * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                *slot = acc.clamp(lo, hi);
            }
        }
    }
    Ok(out)
}

/// Clients plus the held-out test pool of every domain.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientProfile>,
    pub test_sets: Vec<DomainDataset>,
}

impl Federation {
    /// Per-domain and mean accuracy of `model`.
    pub fn evaluate(&self, model: &Network) -> Result<(Vec<f64>, f64)> {
        let accs = self
            .test_sets
            .iter()
            .map(|d| evaluate(model, d))
            .collect::<Result<Vec<_>>>()?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        Ok((accs, mean))
    }

    /// Squared representation norm averaged over all test samples.
    pub fn representation_norm(&self, model: &Network) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for d in &self.test_sets {
            total += representation_norm(model, d)? * d.len() as f64;
            n += d.len();
        }
        Ok(total / n as f64)
    }
}

/// One communication round: every client updates, the server recovers and
/// aggregates, and the new global model is evaluated per domain.
pub fn run_round(
    global: &Network,
    fed: &Federation,
    t: usize,
    cfg: &RoundConfig,
) -> Result<(Network, RoundRecord)> {
    if t < 1 {
        return input("round index starts at 1");
    }
    if fed.clients.is_empty() {
        return input("no clients");
    }
    let start = Instant::now();
    let updates: Vec<ClientUpdate> = if cfg.parallel {
        fed.clients
            .par_iter()
            .map(|c| client_update(global, c, t, cfg))
            .collect::<Result<_>>()?
    } else {
        fed.clients
            .iter()
            .map(|c| client_update(global, c, t, cfg))
            .collect::<Result<_>>()?
    };
    let footprints = updates.iter().map(|u| u.footprint).collect();
    let locals: Vec<(Network, ChannelMask)> =
        updates.into_iter().map(|u| (u.model, u.mask)).collect();
    let recovered = recover_all(&locals, global)?;
    let counts: Vec<usize> = fed.clients.iter().map(|c| c.sample_count).collect();
    let next = aggregate(&recovered, &counts)?;
    let (domain_accuracy, global_accuracy) = fed.evaluate(&next)?;
    let alpha = if cfg.update.uses_fusion() {
        cfg.hyper.fusion.alpha_at(t)?
    } else {
        0.0
    };
    let record = RoundRecord {
        round: t,
        alpha,
        footprints,
        domain_accuracy,
        global_accuracy,
        wall_ms: start.elapsed().as_millis(),
    };
    Ok((next, record))
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub records: Vec<RoundRecord>,
    pub model: Network,
}

/// Rounds `1..=rounds` starting from `initial`.
pub fn run_training(
    initial: &Network,
    fed: &Federation,
    cfg: &RoundConfig,
) -> Result<TrainingOutcome> {
    let mut model = initial.clone();
    let mut records = Vec::with_capacity(cfg.hyper.rounds);
    for t in 1..=cfg.hyper.rounds {
        let (next, record) = run_round(&model, fed, t, cfg)?;
        model = next;
        records.push(record);
    }
    Ok(TrainingOutcome { records, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, LayerSpec};

    fn net(seed: u64) -> Network {
        init_network(&[LayerSpec::dense(3, 4), LayerSpec::predictor(4, 2)], seed).unwrap()
    }

    #[test]
    fn level_table_defaults() {
        let t = LevelTable::default();
        assert_eq!(t.rho(1).unwrap(), 0.0);
        assert_eq!(t.rho(3).unwrap(), 0.4);
        assert_eq!(t.rho(5).unwrap(), 0.8);
        assert!(t.rho(0).is_err());
        assert!(t.rho(6).is_err());
    }

    #[test]
    fn single_client_aggregate_is_identity() {
        let a = net(1);
        assert_eq!(aggregate(std::slice::from_ref(&a), &[7]).unwrap(), a);
    }

    #[test]
    fn weighted_mean_of_two() {
        let a = net(1);
        let b = a.zip_map(&a, |_, _| 3.0).unwrap();
        let a = a.zip_map(&a, |_, _| 1.0).unwrap();
        let g = aggregate(&[a, b], &[1, 3]).unwrap();
        assert!(g.flat_params().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn identical_models_aggregate_exactly() {
        let a = net(4);
        let g = aggregate(&[a.clone(), a.clone(), a.clone()], &[1, 1, 1]).unwrap();
        assert_eq!(g, a);
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[net(1)], &[0]).is_err());
        let other = init_network(&[LayerSpec::predictor(3, 2)], 0).unwrap();
        assert!(aggregate(&[net(1), other], &[1, 1]).is_err());
    }
}
