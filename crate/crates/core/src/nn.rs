//! A small differentiable network engine: a fixed chain of dense and
//! same-padded 2-D convolution layers with hand-written backpropagation and
//! momentum SGD.
//!
//! All layers except the last form the encoder; the last layer is a linear
//! predictor. When a dense layer follows a convolution, the feature maps are
//! global-average-pooled so the channel chain stays one-to-one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{config, input, Error, Result};
use crate::local::{LossBreakdown, Objective};
use crate::masking::ChannelMask;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d { kernel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    pub prunable: bool,
}

impl LayerSpec {
    /// Prunable ReLU dense layer.
    pub fn dense(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_channels,
            out_channels,
            activation: Activation::Relu,
            prunable: true,
        }
    }

    /// Prunable ReLU convolution with a square odd kernel.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d { kernel },
            in_channels,
            out_channels,
            activation: Activation::Relu,
            prunable: true,
        }
    }

    /// Final linear layer producing logits.
    pub fn predictor(in_channels: usize, num_classes: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_channels,
            out_channels: num_classes,
            activation: Activation::None,
            prunable: false,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.out_channels, self.in_channels],
            LayerKind::Conv2d { kernel } => {
                vec![self.out_channels, self.in_channels, kernel, kernel]
            }
        }
    }

    /// Number of weights feeding one output channel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_channels,
            LayerKind::Conv2d { kernel } => self.in_channels * kernel * kernel,
        }
    }
}

/// Checks that a layer list forms a valid chain ending in a predictor.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let Some(last) = specs.last() else {
        return config("network needs at least one layer");
    };
    if last.kind != LayerKind::Dense || last.prunable || last.activation != Activation::None {
        return config("final layer must be a non-prunable dense layer without activation");
    }
    for (k, spec) in specs.iter().enumerate() {
        if spec.in_channels == 0 || spec.out_channels == 0 {
            return config(format!("layer {k} has a zero channel count"));
        }
        if let LayerKind::Conv2d { kernel } = spec.kind {
            if kernel == 0 || kernel % 2 == 0 {
                return config(format!("layer {k}: conv kernel must be odd, got {kernel}"));
            }
            if k > 0 && specs[k - 1].kind == LayerKind::Dense {
                return config(format!("layer {k}: convolution cannot follow a dense layer"));
            }
        }
        if k + 1 < specs.len() && specs[k + 1].in_channels != spec.out_channels {
            return config(format!(
                "layer {} expects {} input channels but layer {k} produces {}",
                k + 1,
                specs[k + 1].in_channels,
                spec.out_channels
            ));
        }
    }
    Ok(())
}

/// Weight and bias of one layer. Also used for gradients, velocities and
/// anything else that mirrors the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(spec: &LayerSpec) -> Self {
        LayerParams {
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    input_hw: (usize, usize),
}

/// Builds a network with He-uniform weights and zero biases.
pub fn init_network(specs: &[LayerSpec], seed: u64) -> Result<Network> {
    validate_specs(specs)?;
    let mut rng = seed::rng(seed);
    let params = specs
        .iter()
        .map(|spec| {
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let mut weight = Tensor::zeros(&spec.weight_shape());
            for w in weight.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
            LayerParams {
                weight,
                bias: Tensor::zeros(&[spec.out_channels]),
            }
        })
        .collect();
    Ok(Network {
        layers: specs.to_vec(),
        params,
        input_hw: (1, 1),
    })
}

impl Network {
    /// Builds a network from explicit parameters.
    pub fn from_params(specs: &[LayerSpec], params: Vec<LayerParams>) -> Result<Network> {
        validate_specs(specs)?;
        if params.len() != specs.len() {
            return input("parameter list length differs from layer count");
        }
        for (k, (spec, p)) in specs.iter().zip(&params).enumerate() {
            if p.weight.shape() != spec.weight_shape().as_slice()
                || p.bias.shape() != [spec.out_channels]
            {
                return input(format!("layer {k}: parameter shapes do not match spec"));
            }
        }
        Ok(Network {
            layers: specs.to_vec(),
            params,
            input_hw: (1, 1),
        })
    }

    /// Records the spatial input size used for FLOP accounting of conv layers.
    pub fn with_input_hw(mut self, h: usize, w: usize) -> Self {
        self.input_hw = (h, w);
        self
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    /// Layers `0..encoder_len` form the encoder; the rest is the predictor.
    pub fn encoder_len(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::len).sum()
    }

    /// All parameters flattened in layer order, weight before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.weight.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn same_structure(&self, other: &Network) -> bool {
        self.layers == other.layers
    }

    pub(crate) fn check_structure(&self, other: &Network) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            input("networks have different layer structures")
        }
    }

    /// Elementwise combination of two structurally identical networks.
    pub fn zip_map(&self, other: &Network, f: impl Fn(f64, f64) -> f64) -> Result<Network> {
        self.check_structure(other)?;
        let mut out = self.clone();
        for (p, q) in out.params.iter_mut().zip(&other.params) {
            for (a, &b) in p.weight.data_mut().iter_mut().zip(q.weight.data()) {
                *a = f(*a, b);
            }
            for (a, &b) in p.bias.data_mut().iter_mut().zip(q.bias.data()) {
                *a = f(*a, b);
            }
        }
        Ok(out)
    }

    /// Returns `(representation, logits)` for a batch.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let trace = self.trace(batch)?;
        let rep = trace.inputs[self.encoder_len()].clone();
        Ok((rep, trace.output))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.trace(batch)?.output)
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let first = &self.layers[0];
        let shape = batch.shape();
        let ok = match first.kind {
            LayerKind::Dense => shape.len() == 2 && shape[1] == first.in_channels,
            LayerKind::Conv2d { .. } => shape.len() == 4 && shape[1] == first.in_channels,
        };
        if ok {
            Ok(())
        } else {
            input(format!(
                "batch shape {shape:?} does not fit first layer {:?} with {} input channels",
                first.kind, first.in_channels
            ))
        }
    }

    fn trace(&self, batch: &Tensor) -> Result<Trace> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut pooled = Vec::with_capacity(self.layers.len());
        let mut act = batch.clone();
        for (spec, p) in self.layers.iter().zip(&self.params) {
            let mut pool = None;
            if spec.kind == LayerKind::Dense && act.shape().len() == 4 {
                pool = Some((act.shape()[2], act.shape()[3]));
                act = global_avg_pool(&act);
            }
            let z = match spec.kind {
                LayerKind::Dense => dense_forward(&act, &p.weight, &p.bias),
                LayerKind::Conv2d { kernel } => conv_forward(&act, &p.weight, &p.bias, kernel),
            };
            let a = match spec.activation {
                Activation::Relu => relu(&z),
                Activation::None => z.clone(),
            };
            inputs.push(act);
            pre.push(z);
            pooled.push(pool);
            act = a;
        }
        Ok(Trace {
            inputs,
            pre,
            pooled,
            output: act,
        })
    }
}

struct Trace {
    /// Input seen by each layer (after pooling).
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    pooled: Vec<Option<(usize, usize)>>,
    output: Tensor,
}

/// Per-parameter gradients, mirroring the network's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<LayerParams>);

impl Gradients {
    pub fn layers(&self) -> &[LayerParams] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.weight.is_finite() && g.bias.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.0 {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(g.bias.data());
        }
        out
    }
}

/// Gradients of `objective` with respect to every parameter, together with
/// the loss value at the current parameters. With a mask attached, masked
/// gradient entries are zero.
pub fn backward(
    net: &Network,
    batch: &Tensor,
    objective: &Objective<'_>,
    mask: Option<&ChannelMask>,
) -> Result<(Gradients, LossBreakdown)> {
    let trace = net.trace(batch)?;
    let last = net.encoder_len();
    let (loss, dlogits, drep) = objective.evaluate(&trace.inputs[last], &trace.output)?;

    let mut grads: Vec<LayerParams> = Vec::with_capacity(net.layers.len());
    let mut upstream = dlogits;
    for k in (0..net.layers.len()).rev() {
        let spec = &net.layers[k];
        let p = &net.params[k];
        if spec.activation == Activation::Relu {
            for (g, &z) in upstream.data_mut().iter_mut().zip(trace.pre[k].data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let x = &trace.inputs[k];
        let (gw, gb, mut gx) = match spec.kind {
            LayerKind::Dense => dense_backward(x, &p.weight, &upstream),
            LayerKind::Conv2d { kernel } => conv_backward(x, &p.weight, &upstream, kernel),
        };
        if k == last {
            if let Some(dr) = &drep {
                for (a, b) in gx.data_mut().iter_mut().zip(dr.data()) {
                    *a += b;
                }
            }
        }
        if let Some((h, w)) = trace.pooled[k] {
            gx = global_avg_unpool(&gx, h, w);
        }
        grads.push(LayerParams {
            weight: gw,
            bias: gb,
        });
        upstream = gx;
    }
    grads.reverse();
    let mut grads = Gradients(grads);
    if let Some(m) = mask {
        m.zero_masked(&mut grads.0)?;
    }
    Ok((grads, loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<LayerParams>,
}

impl OptimizerState {
    pub fn new(net: &Network, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return config(format!("momentum must lie in [0, 1), got {momentum}"));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() || !lr.is_finite() {
            return config("learning rate and weight decay must be finite, decay nonnegative");
        }
        Ok(OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: net.layers.iter().map(LayerParams::zeros_like).collect(),
        })
    }

    pub fn velocity(&self) -> &[LayerParams] {
        &self.velocity
    }
}

/// One momentum-SGD update: `v = m*v + (g + wd*w); w -= lr*v`.
///
/// With a mask attached, masked entries of `w`, `g` and `v` are held at zero.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    opt: &mut OptimizerState,
    mask: Option<&ChannelMask>,
) -> Result<()> {
    if grads.0.len() != net.params.len() {
        return input("gradient layout does not match network");
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient, step aborted".into()));
    }
    let mut grads = grads.clone();
    if let Some(m) = mask {
        m.zero_masked(&mut net.params)?;
        m.zero_masked(&mut grads.0)?;
        m.zero_masked(&mut opt.velocity)?;
    }
    let (lr, mom, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for ((p, g), v) in net.params.iter_mut().zip(&grads.0).zip(opt.velocity.iter_mut()) {
        let pairs = [
            (&mut p.weight, &g.weight, &mut v.weight),
            (&mut p.bias, &g.bias, &mut v.bias),
        ];
        for (w, g, v) in pairs {
            if w.shape() != g.shape() {
                return input("gradient shape does not match parameter shape");
            }
            for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mom * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
    }
    if let Some(m) = mask {
        m.zero_masked(&mut net.params)?;
        m.zero_masked(&mut opt.velocity)?;
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy of `net` on `data`.
pub fn evaluate(net: &Network, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return input("cannot evaluate on an empty dataset");
    }
    let n = data.len();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.features.select_rows(chunk);
        let logits = net.logits(&batch)?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Mean over samples of the squared L2 norm of the encoder output.
pub fn representation_norm(net: &Network, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return input("cannot measure an empty dataset");
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (rep, _) = net.forward(&data.features.select_rows(chunk))?;
        total += rep.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

fn relu(z: &Tensor) -> Tensor {
    let mut a = z.clone();
    for v in a.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    a
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut out = Tensor::zeros(&[n, dout]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for (r, orow) in out.data_mut().chunks_mut(dout).enumerate() {
        let xr = &xd[r * din..(r + 1) * din];
        for (o, z) in orow.iter_mut().enumerate() {
            let wr = &wd[o * din..(o + 1) * din];
            *z = bd[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn dense_backward(x: &Tensor, w: &Tensor, gz: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut gw = Tensor::zeros(&[dout, din]);
    let mut gb = Tensor::zeros(&[dout]);
    let mut gx = Tensor::zeros(&[n, din]);
    let (xd, wd, gzd) = (x.data(), w.data(), gz.data());
    for r in 0..n {
        let xr = &xd[r * din..(r + 1) * din];
        let gr = &gzd[r * dout..(r + 1) * dout];
        let gxr = &mut gx.data_mut()[r * din..(r + 1) * din];
        for (o, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &wd[o * din..(o + 1) * din];
            for (gxi, &wi) in gxr.iter_mut().zip(wr) {
                *gxi += g * wi;
            }
        }
        for (o, &g) in gr.iter().enumerate() {
            gb.data_mut()[o] += g;
            let gwr = &mut gw.data_mut()[o * din..(o + 1) * din];
            for (gwi, &xi) in gwr.iter_mut().zip(xr) {
                *gwi += g * xi;
            }
        }
    }
    (gw, gb, gx)
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[0];
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let (xd, wt, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for img in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bd[o];
                    for i in 0..cin {
                        for dy in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let sx = xx as isize + dx as isize - pad;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let xi = ((img * cin + i) * h + sy as usize) * wd + sx as usize;
                                let wi = ((o * cin + i) * k + dy) * k + dx;
                                acc += wt[wi] * xd[xi];
                            }
                        }
                    }
                    od[((img * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(x: &Tensor, w: &Tensor, gz: &Tensor, k: usize) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[0];
    let pad = (k / 2) as isize;
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = Tensor::zeros(s);
    let (xd, wt, gzd) = (x.data(), w.data(), gz.data());
    for img in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let g = gzd[((img * cout + o) * h + y) * wd + xx];
                    if g == 0.0 {
                        continue;
                    }
                    gb.data_mut()[o] += g;
                    for i in 0..cin {
                        for dy in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let sx = xx as isize + dx as isize - pad;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let xi = ((img * cin + i) * h + sy as usize) * wd + sx as usize;
                                let wi = ((o * cin + i) * k + dy) * k + dx;
                                gw.data_mut()[wi] += g * xd[xi];
                                gx.data_mut()[xi] += g * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gw, gb, gx)
}

fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, area) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[n, c]);
    for (o, plane) in out.data_mut().iter_mut().zip(x.data().chunks(area)) {
        *o = plane.iter().sum::<f64>() / area as f64;
    }
    out
}

fn global_avg_unpool(g: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c) = (g.shape()[0], g.shape()[1]);
    let area = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (plane, &v) in out.data_mut().chunks_mut(area).zip(g.data()) {
        plane.fill(v / area as f64);
    }
    out
}
