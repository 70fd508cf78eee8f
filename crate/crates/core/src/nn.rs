//! Multilayer perceptron trained with plain mini-batch SGD.
//!
//! Hidden layers use ReLU, the output layer softmax, and the loss is mean
//! cross-entropy over the mini-batch. Everything is `f64`.
//!
//! Parameters flatten in a fixed order: layers in sequence, each layer's
//! weights row-major (`outputs x inputs`) followed by its biases.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture {0:?}: need at least two non-empty layers")]
    InvalidArch(Vec<usize>),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("parameter vector has length {found}, architecture needs {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("target row {row} is not a probability vector")]
    InvalidTargets { row: usize },
    #[error("loss became non-finite in epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(&'static str),
}

/// Layer widths from input to output.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    layer_sizes: Vec<usize>,
}

impl Arch {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NnError::InvalidArch(layer_sizes));
        }
        Ok(Self { layer_sizes })
    }

    /// 784 inputs, one hidden layer of 128 units, 10 classes.
    pub fn mnist() -> Self {
        Self {
            layer_sizes: vec![784, 128, 10],
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.weights[out * self.inputs + input]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: &Arch) -> Self {
        let layers = arch
            .layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(values: &[f64], arch: &Arch) -> Result<Self, NnError> {
        if values.len() != arch.param_count() {
            return Err(NnError::LengthMismatch {
                expected: arch.param_count(),
                found: values.len(),
            });
        }
        let mut params = Self::zeros(arch);
        let mut rest = values;
        for l in &mut params.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(alpha, &b.weights, &mut a.weights);
            axpy(alpha, &b.bias, &mut a.bias);
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// He-style fan-in uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
pub fn init_params<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> ModelParams {
    let mut params = ModelParams::zeros(arch);
    for l in &mut params.layers {
        let a = (6.0 / l.inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        for w in &mut l.weights {
            *w = dist.sample(rng);
        }
    }
    params
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Labelled samples with inputs in `[0, 1]` and one-hot (or probability) targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    features: usize,
    classes: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, features: usize, classes: usize) -> Result<Self, NnError> {
        if features == 0 || classes == 0 {
            return Err(NnError::InvalidHyperparameter("batch needs features and classes"));
        }
        if !inputs.len().is_multiple_of(features) {
            return Err(NnError::ShapeMismatch {
                expected: features,
                found: inputs.len() % features,
            });
        }
        let rows = inputs.len() / features;
        if targets.len() != rows * classes {
            return Err(NnError::ShapeMismatch {
                expected: rows * classes,
                found: targets.len(),
            });
        }
        for (row, t) in targets.chunks(classes).enumerate() {
            let sum: f64 = t.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || t.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(NnError::InvalidTargets { row });
            }
        }
        Ok(Self {
            inputs,
            targets,
            features,
            classes,
        })
    }

    pub fn from_labels(inputs: Vec<f64>, labels: &[usize], features: usize, classes: usize) -> Result<Self, NnError> {
        let mut targets = vec![0.0; labels.len() * classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(NnError::InvalidTargets { row });
            }
            targets[row * classes + label] = 1.0;
        }
        Self::new(inputs, targets, features, classes)
    }

    pub fn rows(&self) -> usize {
        self.inputs.len() / self.features
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.targets[i * self.classes..(i + 1) * self.classes]
    }
}

/// Read access to a labelled sample collection, so evaluation can stream
/// from compact storage without materialising an `f64` matrix.
pub trait Samples: Sync {
    fn len(&self) -> usize;
    fn features(&self) -> usize;
    fn fill_input(&self, i: usize, out: &mut [f64]);
    fn label(&self, i: usize) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Samples for Batch {
    fn len(&self) -> usize {
        self.rows()
    }
    fn features(&self) -> usize {
        self.features
    }
    fn fill_input(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.input_row(i));
    }
    fn label(&self, i: usize) -> usize {
        argmax(self.target_row(i))
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-layer activation buffers for a block of rows.
struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<f64>,
    next_deltas: Vec<f64>,
}

impl Scratch {
    fn new(arch: &Arch) -> Self {
        Self {
            acts: vec![Vec::new(); arch.layer_sizes.len() - 1],
            deltas: Vec::new(),
            next_deltas: Vec::new(),
        }
    }
}

/// Fills `scratch.acts`; the last entry holds raw logits.
fn forward_logits(params: &ModelParams, input: &[f64], rows: usize, scratch: &mut Scratch, exec: Execution) {
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let (done, todo) = scratch.acts.split_at_mut(li);
        let prev: &[f64] = if li == 0 { input } else { &done[li - 1] };
        let out = &mut todo[0];
        out.clear();
        out.resize(rows * layer.outputs, 0.0);
        let relu = li != last;
        exec.for_each_chunk_mut(out, layer.outputs, layer.inputs, |r, row| {
            let x = &prev[r * layer.inputs..(r + 1) * layer.inputs];
            for (o, z) in row.iter_mut().enumerate() {
                let v = layer.bias[o] + dot(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs], x);
                *z = if relu { v.max(0.0) } else { v };
            }
        });
    }
}

/// In-place softmax of each row; returns the summed cross-entropy against
/// `targets` when provided.
fn softmax_rows(logits: &mut [f64], classes: usize, targets: Option<&[f64]>) -> f64 {
    let mut loss = 0.0;
    for (r, row) in logits.chunks_mut(classes).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        if let Some(t) = targets {
            let t = &t[r * classes..(r + 1) * classes];
            for (z, y) in row.iter().zip(t) {
                if *y != 0.0 {
                    loss -= y * (z - lse);
                }
            }
        }
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    loss
}

fn check_input(params: &ModelParams, features: usize) -> Result<(), NnError> {
    if features != params.arch.inputs() {
        return Err(NnError::ShapeMismatch {
            expected: params.arch.inputs(),
            found: features,
        });
    }
    Ok(())
}

/// Class probabilities, one row per input row.
pub fn forward(params: &ModelParams, inputs: &[f64]) -> Result<Vec<f64>, NnError> {
    forward_with(params, inputs, Execution::default())
}

pub fn forward_with(params: &ModelParams, inputs: &[f64], exec: Execution) -> Result<Vec<f64>, NnError> {
    let features = params.arch.inputs();
    if !inputs.len().is_multiple_of(features) {
        return Err(NnError::ShapeMismatch {
            expected: features,
            found: inputs.len() % features,
        });
    }
    let rows = inputs.len() / features;
    let mut scratch = Scratch::new(&params.arch);
    forward_logits(params, inputs, rows, &mut scratch, exec);
    let mut probs = scratch.acts.pop().unwrap();
    softmax_rows(&mut probs, params.arch.outputs(), None);
    Ok(probs)
}

/// Mean cross-entropy over `rows` samples and its gradient, written into `grads`.
fn backprop(
    params: &ModelParams,
    input: &[f64],
    targets: &[f64],
    rows: usize,
    scratch: &mut Scratch,
    grads: &mut ModelParams,
    exec: Execution,
) -> f64 {
    forward_logits(params, input, rows, scratch, exec);
    let classes = params.arch.outputs();
    let last = params.layers.len() - 1;
    let loss = softmax_rows(&mut scratch.acts[last], classes, Some(targets)) / rows as f64;

    let inv = 1.0 / rows as f64;
    scratch.deltas.clear();
    scratch
        .deltas
        .extend(scratch.acts[last].iter().zip(targets).map(|(p, y)| (p - y) * inv));

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let prev: &[f64] = if li == 0 { input } else { &scratch.acts[li - 1] };
        let deltas = &scratch.deltas;
        let g = &mut grads.layers[li];

        exec.for_each_chunk_mut(&mut g.weights, layer.inputs, rows * layer.inputs, |o, gw| {
            gw.fill(0.0);
            for r in 0..rows {
                let d = deltas[r * layer.outputs + o];
                if d != 0.0 {
                    axpy(d, &prev[r * layer.inputs..(r + 1) * layer.inputs], gw);
                }
            }
        });
        for (o, gb) in g.bias.iter_mut().enumerate() {
            *gb = (0..rows).map(|r| deltas[r * layer.outputs + o]).sum();
        }

        if li > 0 {
            let next = &mut scratch.next_deltas;
            next.clear();
            next.resize(rows * layer.inputs, 0.0);
            exec.for_each_chunk_mut(next, layer.inputs, layer.outputs, |r, nd| {
                for o in 0..layer.outputs {
                    let d = deltas[r * layer.outputs + o];
                    if d != 0.0 {
                        axpy(d, &layer.weights[o * layer.inputs..(o + 1) * layer.inputs], nd);
                    }
                }
                let a = &prev[r * layer.inputs..(r + 1) * layer.inputs];
                for (v, &act) in nd.iter_mut().zip(a) {
                    if act <= 0.0 {
                        *v = 0.0;
                    }
                }
            });
            std::mem::swap(&mut scratch.deltas, &mut scratch.next_deltas);
        }
    }
    loss
}

/// Mean cross-entropy loss and its exact gradient over the whole batch.
pub fn loss_and_gradient(params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams), NnError> {
    check_input(params, batch.features)?;
    if batch.classes != params.arch.outputs() {
        return Err(NnError::ShapeMismatch {
            expected: params.arch.outputs(),
            found: batch.classes,
        });
    }
    let mut grads = ModelParams::zeros(&params.arch);
    let mut scratch = Scratch::new(&params.arch);
    let loss = backprop(
        params,
        &batch.inputs,
        &batch.targets,
        batch.rows(),
        &mut scratch,
        &mut grads,
        Execution::default(),
    );
    Ok((loss, grads))
}

pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64, NnError> {
    loss_and_gradient(params, batch).map(|(l, _)| l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 3,
            batch_size: 1,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(NnError::InvalidHyperparameter("learning rate must be positive"));
        }
        if self.epochs < 1 {
            return Err(NnError::InvalidHyperparameter("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(NnError::InvalidHyperparameter("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Runs `epochs` passes of mini-batch SGD over `data`, reshuffling the
/// sample order from `rng` before each pass.
pub fn train<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &Batch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ModelParams, NnError> {
    cfg.validate()?;
    check_input(params, data.features)?;
    if data.classes != params.arch.outputs() {
        return Err(NnError::ShapeMismatch {
            expected: params.arch.outputs(),
            found: data.classes,
        });
    }
    let mut params = params.clone();
    let mut grads = ModelParams::zeros(&params.arch);
    let mut scratch = Scratch::new(&params.arch);
    let (f, c) = (data.features, data.classes);
    let mut xb = Vec::with_capacity(cfg.batch_size * f);
    let mut yb = Vec::with_capacity(cfg.batch_size * c);
    let mut order: Vec<usize> = (0..data.rows()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            xb.clear();
            yb.clear();
            for &i in idx {
                xb.extend_from_slice(data.input_row(i));
                yb.extend_from_slice(data.target_row(i));
            }
            let loss = backprop(&params, &xb, &yb, idx.len(), &mut scratch, &mut grads, cfg.exec);
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, step });
            }
            params.axpy(-cfg.lr, &grads);
        }
    }
    Ok(params)
}

/// Fraction of rows whose argmax prediction matches the target's argmax.
pub fn evaluate(params: &ModelParams, testset: &Batch) -> Result<f64, NnError> {
    evaluate_samples(params, testset, Execution::default())
}

const EVAL_BLOCK: usize = 256;

pub fn evaluate_samples<S: Samples + ?Sized>(params: &ModelParams, samples: &S, exec: Execution) -> Result<f64, NnError> {
    check_input(params, samples.features())?;
    let n = samples.len();
    if n == 0 {
        return Ok(0.0);
    }
    let f = samples.features();
    let blocks = n.div_ceil(EVAL_BLOCK);
    let correct: usize = exec
        .map_indices(blocks, EVAL_BLOCK * params.param_count(), |b| {
            let start = b * EVAL_BLOCK;
            let end = (start + EVAL_BLOCK).min(n);
            let rows = end - start;
            let mut x = vec![0.0; rows * f];
            for (k, i) in (start..end).enumerate() {
                samples.fill_input(i, &mut x[k * f..(k + 1) * f]);
            }
            let mut scratch = Scratch::new(&params.arch);
            forward_logits(params, &x, rows, &mut scratch, Execution::Sequential);
            let logits = scratch.acts.last().unwrap();
            let c = params.arch.outputs();
            (start..end)
                .enumerate()
                .filter(|(k, i)| argmax(&logits[k * c..(k + 1) * c]) == samples.label(*i))
                .count()
        })
        .into_iter()
        .sum();
    Ok(correct as f64 / n as f64)
}
