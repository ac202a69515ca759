//! Feed-forward calibration network: dense tanh layers trained with Adagrad on
//! the summed squared error between predicted and measured DL channels.
//!
//! Complex channels are fed to the real-valued network as interleaved
//! `(re, im)` pairs in row-major entry order. In [`NetMode::PerUser`] one
//! network per user maps that user's UL channel (`2M` reals) to its DL channel;
//! in [`NetMode::Joint`] a single network maps the whole `H_UL` (`2MN` reals)
//! to the whole `H_DL`.

use std::fmt;
use std::str::FromStr;

use crate::channel::CalibrationDataset;
use crate::error::{CalibError, Result};
use crate::numerics::{CMatrix, SimRng, C64};

/// Flattens a complex matrix into `(re, im)` pairs, row-major.
pub fn encode_channels(h: &CMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * h.as_slice().len());
    for z in h.as_slice() {
        out.push(z.re);
        out.push(z.im);
    }
    out
}

/// Exact inverse of [`encode_channels`].
pub fn decode_channels(values: &[f64], rows: usize, cols: usize) -> Result<CMatrix> {
    if values.len() != 2 * rows * cols {
        return Err(CalibError::shape(
            "decode_channels",
            format!("{rows}x{cols} complex"),
            format!("{} reals", values.len()),
        ));
    }
    let data = values
        .chunks_exact(2)
        .map(|p| C64::new(p[0], p[1]))
        .collect();
    CMatrix::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        })
    }
}

impl FromStr for Activation {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(CalibError::invalid(format!("unknown activation `{s}`"))),
        }
    }
}

/// One dense layer `act(W r + b)`; `weights` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Layer {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    /// Bumped by every parameter update; ties forward caches to parameters.
    version: u64,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Network> {
        if layers.is_empty() {
            return Err(CalibError::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(CalibError::invalid(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(CalibError::shape(
                    "layer parameters",
                    format!("{}x{}", l.out_dim, l.in_dim),
                    format!("{} weights, {} biases", l.weights.len(), l.bias.len()),
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(CalibError::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(CalibError::invalid(format!(
                    "layer {i} emits {} values but layer {} consumes {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(Network { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    /// `(d0, d1, ..., dL)`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Per-layer activations of one forward pass (`activations[0]` is the input).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
    version: u64,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.activations[self.activations.len() - 1]
    }

    pub fn activations(&self) -> &[Vec<f64>] {
        &self.activations
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn forward_layer(layer: &Layer, input: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = layer.activation.apply(layer.bias[i] + dot(layer.row(i), input));
    }
}

fn forward_into(net: &Network, input: &[f64], acts: &mut [Vec<f64>]) {
    acts[0].copy_from_slice(input);
    for (l, layer) in net.layers.iter().enumerate() {
        let (prev, next) = acts.split_at_mut(l + 1);
        forward_layer(layer, &prev[l], &mut next[0]);
    }
}

/// Runs every layer and keeps the activations for [`backward`].
pub fn forward(net: &Network, input: &[f64]) -> Result<ForwardCache> {
    if input.len() != net.input_dim() {
        return Err(CalibError::shape(
            "forward",
            format!("input_dim {}", net.input_dim()),
            format!("input length {}", input.len()),
        ));
    }
    let mut activations: Vec<Vec<f64>> = net.dims().into_iter().map(|d| vec![0.0; d]).collect();
    forward_into(net, input, &mut activations);
    Ok(ForwardCache {
        activations,
        version: net.version,
    })
}

/// Parameter-shaped buffer used for gradients and Adagrad accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuffer {
    pub layers: Vec<LayerBuffer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBuffer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub type Gradients = ParamBuffer;

impl ParamBuffer {
    pub fn zeros_like(net: &Network) -> ParamBuffer {
        ParamBuffer {
            layers: net
                .layers
                .iter()
                .map(|l| LayerBuffer {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// All entries in layer order (weights then bias per layer).
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    fn matches(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(b, l)| b.weights.len() == l.weights.len() && b.bias.len() == l.bias.len())
    }
}

/// Scratch space for allocation-free passes.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(net: &Network) -> Workspace {
        let dims = net.dims();
        Workspace {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

/// Accumulates the gradient of `||out - target||^2` into `grads`; returns the loss.
fn backward_into(
    net: &Network,
    acts: &[Vec<f64>],
    target: &[f64],
    grads: &mut Gradients,
    deltas: &mut [Vec<f64>],
) -> f64 {
    let last = net.layers.len() - 1;
    let out = &acts[last + 1];
    let act = net.layers[last].activation;
    let mut loss = 0.0;
    for ((d, &y), &t) in deltas[last].iter_mut().zip(out).zip(target) {
        let diff = y - t;
        loss += diff * diff;
        *d = 2.0 * diff * act.derivative_from_output(y);
    }
    for l in (0..=last).rev() {
        let layer = &net.layers[l];
        let input = &acts[l];
        let (lower, upper) = deltas.split_at_mut(l);
        let delta = &upper[0];
        let g = &mut grads.layers[l];
        for (i, &di) in delta.iter().enumerate() {
            if di != 0.0 {
                axpy(di, input, &mut g.weights[i * layer.in_dim..(i + 1) * layer.in_dim]);
            }
            g.bias[i] += di;
        }
        if l > 0 {
            let below = &mut lower[l - 1];
            below.iter_mut().for_each(|v| *v = 0.0);
            for (i, &di) in delta.iter().enumerate() {
                if di != 0.0 {
                    axpy(di, layer.row(i), below);
                }
            }
            let below_act = net.layers[l - 1].activation;
            for (b, &a) in below.iter_mut().zip(input) {
                *b *= below_act.derivative_from_output(a);
            }
        }
    }
    loss
}

/// Exact gradient of `||forward(input) - target||^2` with respect to every
/// weight and bias.
pub fn backward(net: &Network, cache: &ForwardCache, target: &[f64]) -> Result<Gradients> {
    if cache.version != net.version {
        return Err(CalibError::InvalidState(format!(
            "forward cache was computed for parameter version {}, network is at {}",
            cache.version, net.version
        )));
    }
    let dims = net.dims();
    if cache.activations.len() != dims.len()
        || cache.activations.iter().zip(&dims).any(|(a, &d)| a.len() != d)
    {
        return Err(CalibError::InvalidState(
            "forward cache does not match the network's layer sizes".into(),
        ));
    }
    if target.len() != net.output_dim() {
        return Err(CalibError::shape(
            "backward",
            format!("output_dim {}", net.output_dim()),
            format!("target length {}", target.len()),
        ));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut deltas: Vec<Vec<f64>> = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
    backward_into(net, &cache.activations, target, &mut grads, &mut deltas);
    Ok(grads)
}

/// Summed squared error over a batch of `(input, target)` pairs.
pub fn loss(net: &Network, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(CalibError::shape("loss", inputs.len(), targets.len()));
    }
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        if t.len() != net.output_dim() {
            return Err(CalibError::shape(
                "loss",
                format!("output_dim {}", net.output_dim()),
                format!("target length {}", t.len()),
            ));
        }
        let cache = forward(net, x)?;
        total += cache
            .output()
            .iter()
            .zip(t)
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>();
    }
    Ok(total)
}

/// Adagrad accumulators: one running sum of squared gradients per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accum: ParamBuffer,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-8;

impl AdagradState {
    pub fn new(net: &Network, epsilon: f64) -> AdagradState {
        AdagradState {
            accum: ParamBuffer::zeros_like(net),
            epsilon,
        }
    }
}

/// `G += g^2; θ -= η g / (sqrt(G) + ε)`, entrywise.
pub fn adagrad_step(
    net: &mut Network,
    state: &mut AdagradState,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<()> {
    if !grads.matches(net) || !state.accum.matches(net) {
        return Err(CalibError::shape(
            "adagrad_step",
            format!("network dims {:?}", net.dims()),
            "gradient/accumulator buffers",
        ));
    }
    let eps = state.epsilon;
    let update = |theta: &mut [f64], acc: &mut [f64], g: &[f64]| {
        for ((t, a), &gi) in theta.iter_mut().zip(acc.iter_mut()).zip(g) {
            *a += gi * gi;
            *t -= learning_rate * gi / (a.sqrt() + eps);
        }
    };
    for ((layer, acc), g) in net
        .layers
        .iter_mut()
        .zip(&mut state.accum.layers)
        .zip(&grads.layers)
    {
        update(&mut layer.weights, &mut acc.weights, &g.weights);
        update(&mut layer.bias, &mut acc.bias, &g.bias);
    }
    net.version += 1;
    Ok(())
}

/// Glorot-uniform weights, zero biases, zero Adagrad accumulators. Hidden
/// layers use tanh; the last layer uses `output_activation`.
pub fn init_network(
    layer_dims: &[usize],
    output_activation: Activation,
    rng: &mut SimRng,
) -> Result<(Network, AdagradState)> {
    if layer_dims.len() < 2 {
        return Err(CalibError::invalid(format!(
            "need at least input and output dimensions, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(CalibError::invalid(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    let count = layer_dims.len() - 1;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let activation = if i + 1 == count {
                output_activation
            } else {
                Activation::Tanh
            };
            let mut layer = Layer::zeros(fan_in, fan_out, activation);
            for v in &mut layer.weights {
                *v = rng.uniform_range(-limit, limit);
            }
            layer
        })
        .collect();
    let net = Network::new(layers)?;
    let state = AdagradState::new(&net, DEFAULT_EPSILON);
    Ok((net, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetMode {
    PerUser,
    Joint,
}

impl fmt::Display for NetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetMode::PerUser => "per-user",
            NetMode::Joint => "joint",
        })
    }
}

impl FromStr for NetMode {
    type Err = CalibError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-user" => Ok(NetMode::PerUser),
            "joint" => Ok(NetMode::Joint),
            _ => Err(CalibError::invalid(format!("unknown network mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Held-out fraction used by [`train`] for validation.
    pub validation_fraction: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub output_activation: Activation,
    /// Targets are multiplied by this before training and predictions divided
    /// by it; only meaningful with a tanh output layer.
    pub target_scale: f64,
    pub mode: NetMode,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 256,
            batch_size: 4,
            validation_fraction: 0.4,
            seed: 0,
            hidden_dims: vec![128, 128, 128],
            output_activation: Activation::Linear,
            target_scale: 1.0,
            mode: NetMode::PerUser,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CalibError::invalid("learning_rate must be positive"));
        }
        if self.epochs < 1 {
            return Err(CalibError::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(CalibError::invalid("batch_size must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(CalibError::invalid("validation_fraction must lie in (0, 1)"));
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err(CalibError::invalid("target_scale must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(CalibError::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// Full layer dimensions `(input, hidden..., output)` for an `M x N` system.
    pub fn layer_dims(&self, m: usize, n: usize) -> Vec<usize> {
        let io = match self.mode {
            NetMode::PerUser => 2 * m,
            NetMode::Joint => 2 * m * n,
        };
        std::iter::once(io)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(io))
            .collect()
    }
}

/// A trained UL→DL predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Calinet {
    pub mode: NetMode,
    pub m: usize,
    pub n: usize,
    pub target_scale: f64,
    /// One network per user (`PerUser`) or a single network (`Joint`).
    pub nets: Vec<Network>,
}

impl Calinet {
    pub fn new(
        mode: NetMode,
        m: usize,
        n: usize,
        target_scale: f64,
        nets: Vec<Network>,
    ) -> Result<Calinet> {
        let (count, io) = match mode {
            NetMode::PerUser => (n, 2 * m),
            NetMode::Joint => (1, 2 * m * n),
        };
        if nets.len() != count {
            return Err(CalibError::shape(
                "calinet",
                format!("{mode} mode with N={n} needs {count} networks"),
                format!("{} networks", nets.len()),
            ));
        }
        for net in &nets {
            if net.input_dim() != io || net.output_dim() != io {
                return Err(CalibError::shape(
                    "calinet",
                    format!("{io} inputs/outputs"),
                    format!("{:?}", net.dims()),
                ));
            }
        }
        if !(target_scale > 0.0 && target_scale.is_finite()) {
            return Err(CalibError::invalid("target_scale must be positive"));
        }
        Ok(Calinet {
            mode,
            m,
            n,
            target_scale,
            nets,
        })
    }
}

/// Training inputs/targets of one network, stored contiguously.
struct Samples {
    in_dim: usize,
    out_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Samples {
    fn len(&self) -> usize {
        self.inputs.len() / self.in_dim
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.in_dim..(i + 1) * self.in_dim]
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.out_dim..(i + 1) * self.out_dim]
    }
}

/// Network `slot`'s training pairs from a dataset.
fn samples_for(ds: &CalibrationDataset, mode: NetMode, slot: usize, scale: f64) -> Samples {
    let (in_dim, out_dim) = match mode {
        NetMode::PerUser => (2 * ds.m, 2 * ds.m),
        NetMode::Joint => (2 * ds.m * ds.n, 2 * ds.m * ds.n),
    };
    let mut inputs = Vec::with_capacity(ds.len() * in_dim);
    let mut targets = Vec::with_capacity(ds.len() * out_dim);
    let push = |dst: &mut Vec<f64>, z: C64, s: f64| {
        dst.push(z.re * s);
        dst.push(z.im * s);
    };
    for pair in &ds.pairs {
        match mode {
            NetMode::PerUser => {
                for k in 0..ds.m {
                    push(&mut inputs, pair.h_ul[(k, slot)], 1.0);
                }
                for &z in pair.h_dl.row(slot) {
                    push(&mut targets, z, scale);
                }
            }
            NetMode::Joint => {
                inputs.extend(encode_channels(&pair.h_ul));
                targets.extend(encode_channels(&pair.h_dl).into_iter().map(|v| v * scale));
            }
        }
    }
    Samples {
        in_dim,
        out_dim,
        inputs,
        targets,
    }
}

fn sum_squared_error(net: &Network, samples: &Samples, ws: &mut Workspace) -> f64 {
    let mut total = 0.0;
    for i in 0..samples.len() {
        forward_into(net, samples.input(i), &mut ws.acts);
        let out = &ws.acts[ws.acts.len() - 1];
        total += out
            .iter()
            .zip(samples.target(i))
            .map(|(y, t)| (y - t) * (y - t))
            .sum::<f64>();
    }
    total
}

/// Per-epoch training and validation error in channel units: summed squared
/// modulus error divided by the number of complex DL entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Squared-error sums of one network over its epochs.
struct NetCurve {
    train_sse: Vec<f64>,
    val_sse: Vec<f64>,
}

fn train_one(
    train: &Samples,
    val: Option<&Samples>,
    config: &TrainConfig,
    slot: usize,
) -> Result<(Network, NetCurve)> {
    let seed = SimRng::new(config.seed);
    let dims: Vec<usize> = std::iter::once(train.in_dim)
        .chain(config.hidden_dims.iter().copied())
        .chain(std::iter::once(train.out_dim))
        .collect();
    let (mut net, mut state) = init_network(
        &dims,
        config.output_activation,
        &mut seed.fork_indexed("init", slot as u64),
    )?;
    state.epsilon = config.epsilon;
    let mut shuffle = seed.fork_indexed("shuffle", slot as u64);
    let mut ws = Workspace::new(&net);
    let mut grads = Gradients::zeros_like(&net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = NetCurve {
        train_sse: Vec::with_capacity(config.epochs),
        val_sse: Vec::with_capacity(config.epochs),
    };
    for _epoch in 0..config.epochs {
        shuffle.shuffle(&mut order);
        let mut epoch_sse = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.fill_zero();
            for &i in batch {
                forward_into(&net, train.input(i), &mut ws.acts);
                epoch_sse +=
                    backward_into(&net, &ws.acts, train.target(i), &mut grads, &mut ws.deltas);
            }
            adagrad_step(&mut net, &mut state, &grads, config.learning_rate)?;
        }
        if !epoch_sse.is_finite() {
            return Err(CalibError::Degenerate(
                "training diverged (non-finite loss)".into(),
            ));
        }
        curve.train_sse.push(epoch_sse);
        curve
            .val_sse
            .push(val.map_or(f64::NAN, |v| sum_squared_error(&net, v, &mut ws)));
    }
    Ok((net, curve))
}

/// Trains on `train` and reports validation error on `validation` after every
/// epoch. Mini-batch gradients are batch sums; a final short batch is kept.
pub fn train_split(
    train: &CalibrationDataset,
    validation: &CalibrationDataset,
    config: &TrainConfig,
) -> Result<(Calinet, TrainHistory)> {
    let slots: Vec<usize> = match config.mode {
        NetMode::PerUser => (0..train.n).collect(),
        NetMode::Joint => vec![0],
    };
    let (nets, history) = train_slots(train, Some(validation), config, &slots)?;
    let model = Calinet::new(config.mode, train.m, train.n, config.target_scale, nets)?;
    Ok((model, history))
}

/// Trains on every pair of `train` without tracking validation error.
pub fn fit(train: &CalibrationDataset, config: &TrainConfig) -> Result<Calinet> {
    let slots: Vec<usize> = match config.mode {
        NetMode::PerUser => (0..train.n).collect(),
        NetMode::Joint => vec![0],
    };
    let (nets, _) = train_slots(train, None, config, &slots)?;
    Calinet::new(config.mode, train.m, train.n, config.target_scale, nets)
}

/// Trains only user `user`'s network (0-based) of a per-user model. The
/// history covers that user's DL entries alone; validation error is NaN
/// without a validation set.
pub fn train_user(
    train: &CalibrationDataset,
    validation: Option<&CalibrationDataset>,
    config: &TrainConfig,
    user: usize,
) -> Result<(Network, TrainHistory)> {
    if config.mode != NetMode::PerUser {
        return Err(CalibError::invalid("single-user training needs per-user mode"));
    }
    if user >= train.n {
        return Err(CalibError::invalid(format!(
            "user index {user} out of range for N={}",
            train.n
        )));
    }
    let (mut nets, history) = train_slots(train, validation, config, &[user])?;
    Ok((nets.remove(0), history))
}

fn train_slots(
    train: &CalibrationDataset,
    validation: Option<&CalibrationDataset>,
    config: &TrainConfig,
    slots: &[usize],
) -> Result<(Vec<Network>, TrainHistory)> {
    config.validate()?;
    if let Some(v) = validation {
        if (train.m, train.n) != (v.m, v.n) {
            return Err(CalibError::shape(
                "train_split",
                format!("train M={} N={}", train.m, train.n),
                format!("validation M={} N={}", v.m, v.n),
            ));
        }
    }
    let mut nets = Vec::with_capacity(slots.len());
    let mut curves = Vec::with_capacity(slots.len());
    for &slot in slots {
        let tr = samples_for(train, config.mode, slot, config.target_scale);
        let va = validation.map(|v| samples_for(v, config.mode, slot, config.target_scale));
        let (net, curve) = train_one(&tr, va.as_ref(), config, slot)?;
        nets.push(net);
        curves.push(curve);
    }
    // Back to channel units: undo target scaling, count complex DL entries.
    let unit = config.target_scale * config.target_scale;
    let entries = match config.mode {
        NetMode::PerUser => (train.m * slots.len()) as f64,
        NetMode::Joint => (train.m * train.n) as f64,
    };
    let train_norm = unit * entries * train.len() as f64;
    let val_norm = unit * entries * validation.map_or(1, |v| v.len()) as f64;
    let records = (0..config.epochs)
        .map(|e| EpochRecord {
            epoch: e + 1,
            train_mse: curves.iter().map(|c| c.train_sse[e]).sum::<f64>() / train_norm,
            val_mse: curves.iter().map(|c| c.val_sse[e]).sum::<f64>() / val_norm,
        })
        .collect();
    Ok((nets, TrainHistory { records }))
}

/// Predicted DL row of one user from that user's UL channel (`M` entries).
pub fn predict_user(net: &Network, h_ul_user: &[C64], target_scale: f64) -> Result<Vec<C64>> {
    let col = CMatrix::column_vector(h_ul_user);
    let cache = forward(net, &encode_channels(&col))?;
    let inv = 1.0 / target_scale;
    Ok(cache
        .output()
        .chunks_exact(2)
        .map(|p| C64::new(p[0] * inv, p[1] * inv))
        .collect())
}

/// Seeded split into training and validation parts, then [`train_split`].
pub fn train(dataset: &CalibrationDataset, config: &TrainConfig) -> Result<(Calinet, TrainHistory)> {
    config.validate()?;
    let mut rng = SimRng::new(config.seed).fork("split");
    let (tr, va) = dataset.split(config.validation_fraction, &mut rng)?;
    train_split(&tr, &va, config)
}

/// Predicts `H_DL` (`N x M`) from a UL channel estimate (`M x N`).
pub fn predict(model: &Calinet, h_ul: &CMatrix) -> Result<CMatrix> {
    if h_ul.shape() != (model.m, model.n) {
        return Err(CalibError::shape(
            "predict",
            format!("model trained for H_UL {}x{}", model.m, model.n),
            h_ul.shape_str(),
        ));
    }
    let inv = 1.0 / model.target_scale;
    match model.mode {
        NetMode::PerUser => {
            let mut out = CMatrix::zeros(model.n, model.m);
            for (u, net) in model.nets.iter().enumerate() {
                out.set_row(u, &predict_user(net, &h_ul.column(u), model.target_scale)?);
            }
            Ok(out)
        }
        NetMode::Joint => {
            let cache = forward(&model.nets[0], &encode_channels(h_ul))?;
            let scaled: Vec<f64> = cache.output().iter().map(|v| v * inv).collect();
            decode_channels(&scaled, model.n, model.m)
        }
    }
}
