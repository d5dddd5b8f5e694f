#![allow(dead_code)]

use std::ops::RangeInclusive;

use dapperfl_core::data::{DomainDataset, Split};
use dapperfl_core::experiment::{DataSource, ExperimentConfig, SyntheticConfig};
use dapperfl_core::hyper::HyperParams;
use dapperfl_core::local::Objective;
use dapperfl_core::masking::ChannelMask;
use dapperfl_core::nn::{backward, init_network, sgd_step, LayerSpec, Network, OptimizerState};
use dapperfl_core::seed;
use dapperfl_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random dense chain `d -> h1 -> ... -> k`.
pub fn dense_net(widths: &[usize], seed: u64) -> Network {
    let mut specs = Vec::new();
    for w in widths.windows(2).take(widths.len() - 2) {
        specs.push(LayerSpec::dense(w[0], w[1]));
    }
    let n = widths.len();
    specs.push(LayerSpec::predictor(widths[n - 2], widths[n - 1]));
    init_network(&specs, seed).unwrap()
}

/// Perturbs every parameter (biases included) so no entry sits at zero.
pub fn jitter(net: &mut Network, scale: f64, rng: &mut impl Rng) {
    for p in net.params_mut() {
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Gaussian-cluster dataset with `n` samples of dimension `d` and `k` classes.
pub fn blob_dataset(n: usize, d: usize, k: usize, seed_value: u64) -> DomainDataset {
    let mut rng = seed::rng(seed_value);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for m in &means[y] {
            data.push(m + rng.sample::<f64, _>(StandardNormal));
        }
    }
    DomainDataset {
        domain_id: 0,
        features: Tensor::new(vec![n, d], data).unwrap(),
        labels,
        num_classes: k,
        split: Split::Train,
        indices: (0..n).collect(),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Independent evaluation of `mean CE + gamma * mean ||z||^2` from the
/// forward pass, with log-sum-exp written out here.
pub fn oracle_loss(net: &Network, batch: &Tensor, labels: &[usize], gamma: f64) -> f64 {
    let (rep, logits) = net.forward(batch).unwrap();
    let n = labels.len() as f64;
    let mut ce = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    let dar: f64 = rep.data().iter().map(|v| v * v).sum::<f64>() / n;
    ce / n + gamma * dar
}

/// Largest relative error between analytic and central-difference gradients
/// over the positions kept by `mask` (all positions when `None`).
pub fn fd_max_rel_error(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    gamma: f64,
    mask: Option<&ChannelMask>,
) -> f64 {
    let objective = Objective::composite(labels, gamma);
    let (grads, _) = backward(net, batch, &objective, mask).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..net.params().len() {
        for which in 0..2 {
            let len = if which == 0 {
                net.params()[k].weight.len()
            } else {
                net.params()[k].bias.len()
            };
            for pos in 0..len {
                if let Some(m) = mask {
                    let pm = &m.param_masks()[k];
                    let kept = if which == 0 { pm.weight[pos] } else { pm.bias[pos] };
                    if !kept {
                        continue;
                    }
                }
                let eval = |delta: f64| {
                    let mut p = net.clone();
                    let layer = &mut p.params_mut()[k];
                    let t = if which == 0 { &mut layer.weight } else { &mut layer.bias };
                    t.data_mut()[pos] += delta;
                    oracle_loss(&p, batch, labels, gamma)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let g = &grads.layers()[k];
                let analytic = if which == 0 { g.weight.data()[pos] } else { g.bias.data()[pos] };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// Small conv net over `c x hw x hw` inputs: conv(c->4) -> conv(4->3) -> dense(3->5) -> predictor(5->k).
pub fn conv_net(c: usize, hw: usize, k: usize, seed_value: u64) -> Network {
    let specs = vec![
        LayerSpec::conv(c, 4, 3),
        LayerSpec::conv(4, 3, 3),
        LayerSpec::dense(3, 5),
        LayerSpec::predictor(5, k),
    ];
    init_network(&specs, seed_value).unwrap().with_input_hw(hw, hw)
}

/// Mini-batch SGD written against the public engine primitives: a fresh
/// optimizer, and per-epoch shuffles keyed by `(seed, epoch)`.
pub fn reference_sgd(
    net: &mut Network,
    data: &DomainDataset,
    hp: &HyperParams,
    gamma: f64,
    epochs: RangeInclusive<usize>,
    seed_value: u64,
) {
    let mut opt = OptimizerState::new(net, hp.lr, hp.momentum, hp.weight_decay).unwrap();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for e in epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive_seed(seed_value, &[e as u64])));
        for chunk in order.chunks(hp.batch_size) {
            let batch = data.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (g, _) = backward(net, &batch, &Objective::composite(&labels, gamma), None).unwrap();
            sgd_step(net, &g, &mut opt, None).unwrap();
        }
    }
}

/// Sample-weighted average accumulated in list order, projected onto the
/// per-position range of the inputs.
pub fn reference_average(nets: &[Network], counts: &[usize]) -> Network {
    let total: usize = counts.iter().sum();
    let flats: Vec<Vec<f64>> = nets.iter().map(|n| n.flat_params()).collect();
    let mut out = Vec::with_capacity(flats[0].len());
    for pos in 0..flats[0].len() {
        let mut acc = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (f, &c) in flats.iter().zip(counts) {
            acc += (c as f64 / total as f64) * f[pos];
            lo = lo.min(f[pos]);
            hi = hi.max(f[pos]);
        }
        out.push(acc.clamp(lo, hi));
    }
    unflatten(&nets[0], &out)
}

/// Copies a flat parameter vector back into the layout of `like`.
pub fn unflatten(like: &Network, flat: &[f64]) -> Network {
    let mut net = like.clone();
    let mut at = 0;
    for p in net.params_mut() {
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v = flat[at];
            at += 1;
        }
    }
    assert_eq!(at, flat.len());
    net
}

/// A small synthetic experiment that runs in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        rounds: 3,
        clients: 5,
        local_epochs: 2,
        batch_size: 16,
        seeds: vec![1, 2],
        ..ExperimentConfig::default()
    };
    cfg.optimizer.lr = 0.05;
    cfg.model.hidden = vec![10];
    cfg.dataset.source = DataSource::Synthetic(SyntheticConfig {
        domains: 2,
        classes: 3,
        dims: 6,
        samples_per_domain: 400,
        ..SyntheticConfig::default()
    });
    cfg
}
