//! Local training of a pruned model on the composite objective
//! `cross_entropy + gamma * mean ||z||^2`, where `z` is the encoder output.

use rand::seq::SliceRandom;

use crate::data::DomainDataset;
use crate::error::{input, Result};
use crate::hyper::HyperParams;
use crate::masking::ChannelMask;
use crate::nn::{backward, sgd_step, Network, OptimizerState};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dar: f64,
    pub total: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, dar: f64, gamma: f64) -> Self {
        LossBreakdown {
            ce,
            dar,
            total: ce + gamma * dar,
            gamma,
        }
    }
}

/// What `nn::backward` differentiates.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    labels: Option<&'a [usize]>,
    gamma: f64,
}

impl<'a> Objective<'a> {
    /// Cross-entropy plus `gamma` times the representation regularizer.
    pub fn composite(labels: &'a [usize], gamma: f64) -> Self {
        Objective {
            labels: Some(labels),
            gamma,
        }
    }

    pub fn cross_entropy(labels: &'a [usize]) -> Self {
        Self::composite(labels, 0.0)
    }

    /// Only the representation regularizer, scaled by `gamma`.
    pub fn regularizer_only(gamma: f64) -> Self {
        Objective {
            labels: None,
            gamma,
        }
    }

    /// Zero everywhere.
    pub fn constant() -> Self {
        Self::regularizer_only(0.0)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Loss value and its gradients with respect to the logits and the
    /// representation (`None` when the regularizer is switched off).
    pub(crate) fn evaluate(
        &self,
        rep: &Tensor,
        logits: &Tensor,
    ) -> Result<(LossBreakdown, Tensor, Option<Tensor>)> {
        let n = logits.rows() as f64;
        let (ce, dlogits) = match self.labels {
            Some(labels) => {
                let (ce, probs) = softmax_cross_entropy(logits, labels)?;
                let k = logits.row_len();
                let mut g = probs;
                for (r, &y) in labels.iter().enumerate() {
                    g.data_mut()[r * k + y] -= 1.0;
                }
                for v in g.data_mut() {
                    *v /= n;
                }
                (ce, g)
            }
            None => (0.0, Tensor::zeros(logits.shape())),
        };
        let dar = dar_regularizer(rep);
        let drep = (self.gamma != 0.0).then(|| {
            let mut d = rep.clone();
            let scale = 2.0 * self.gamma / n;
            for v in d.data_mut() {
                *v *= scale;
            }
            d
        });
        Ok((LossBreakdown::new(ce, dar, self.gamma), dlogits, drep))
    }
}

/// Batch mean of each sample's squared L2 representation norm.
pub fn dar_regularizer(rep: &Tensor) -> f64 {
    let n = rep.rows();
    let total: f64 = (0..n)
        .map(|r| rep.row(r).iter().map(|v| v * v).sum::<f64>())
        .sum();
    total / n as f64
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_cross_entropy(logits, labels).map(|(ce, _)| ce)
}

fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || labels.len() != logits.rows() {
        return input("logits must be (batch, classes) with one label per row");
    }
    let k = logits.row_len();
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return input(format!("label {y} out of range for {k} classes"));
        }
        let row = &mut probs.data_mut()[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += sum.ln() - (logits.row(r)[y] - max);
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok((total / labels.len() as f64, probs))
}

/// Evaluates the composite objective for one batch. The network must
/// already satisfy `mask`.
pub fn local_objective(
    net: &Network,
    mask: &ChannelMask,
    batch: &Tensor,
    labels: &[usize],
    gamma: f64,
) -> Result<LossBreakdown> {
    if !mask.is_satisfied_by(net)? {
        return input("network has nonzero values at masked positions");
    }
    let (rep, logits) = net.forward(batch)?;
    let (loss, _, _) = Objective::composite(labels, gamma).evaluate(&rep, &logits)?;
    Ok(loss)
}

/// Runs the local epochs that follow fusion pruning (epochs `2..=E`).
pub fn train_local(
    pruned: &Network,
    mask: &ChannelMask,
    data: &DomainDataset,
    cfg: &HyperParams,
    seed: u64,
) -> Result<Network> {
    if data.is_empty() {
        return input("client has no training data");
    }
    let mut net = pruned.clone();
    run_epochs(&mut net, Some(mask), data, cfg, cfg.gamma, 2..=cfg.local_epochs, seed)?;
    Ok(net)
}

/// Shuffled mini-batch SGD over the given epoch numbers with a fresh
/// optimizer. Each epoch's shuffle is keyed by `(seed, epoch)`.
pub(crate) fn run_epochs(
    net: &mut Network,
    mask: Option<&ChannelMask>,
    data: &DomainDataset,
    cfg: &HyperParams,
    gamma: f64,
    epochs: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<()> {
    if epochs.is_empty() {
        return Ok(());
    }
    if cfg.batch_size == 0 {
        return input("batch size must be positive");
    }
    let mut opt = OptimizerState::new(net, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_seed(seed, &[epoch as u64])));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (grads, _) = backward(net, &batch, &Objective::composite(&labels, gamma), mask)?;
            sgd_step(net, &grads, &mut opt, mask)?;
        }
    }
    Ok(())
}
