//! Dense feed-forward layers with backpropagation, SGD/Adam and a flat
//! little-endian checkpoint format.
//!
//! Layers are plain values; a "path" is any ordered slice of layer
//! references, which lets the early-exit network run a trunk prefix plus one
//! branch without copying parameters.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PearlError, Result};
use crate::seed::Rng;

/// Lower/upper clamp applied to sigmoid outputs before binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative of the activation, given the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    /// He-normal init for relu layers, Xavier-normal otherwise; zero bias.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let std = match activation {
            Activation::Relu => (2.0 / in_dim as f64).sqrt(),
            Activation::Linear | Activation::Sigmoid => (2.0 / (in_dim + out_dim) as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(PearlError::DimensionMismatch {
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(PearlError::DimensionMismatch {
                expected: out_dim,
                actual: bias.len(),
            });
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(PearlError::InvalidArgument(
                "layer parameters must be finite".into(),
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Multiply-adds counted as two flops each.
    pub fn flops(&self) -> usize {
        2 * self.in_dim * self.out_dim
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(PearlError::DimensionMismatch {
                expected: self.in_dim,
                actual: x.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.out_dim);
        let mut out = Vec::with_capacity(self.out_dim);
        self.forward_into(x, &mut pre, &mut out);
        Ok(out)
    }

    /// Unchecked forward that writes pre-activations and outputs into reusable buffers.
    pub(crate) fn forward_into(&self, x: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        pre.clear();
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let z = row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi);
            pre.push(z);
            out.push(self.activation.apply(z));
        }
    }

    /// SHA-256 over the little-endian parameter bytes (weights then bias).
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.weights.iter().chain(self.bias.iter()) {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Gradient of a scalar loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|g| *g *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|g| *g == 0.0)
    }
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Output of layer `i` of the traced path.
    pub fn layer_output(&self, i: usize) -> &[f64] {
        &self.outputs[i]
    }
}

fn check_path(layers: &[&DenseLayer], x: &[f64]) -> Result<()> {
    let Some(first) = layers.first() else {
        return Err(PearlError::InvalidArgument("empty layer path".into()));
    };
    if x.len() != first.in_dim {
        return Err(PearlError::DimensionMismatch {
            expected: first.in_dim,
            actual: x.len(),
        });
    }
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(PearlError::DimensionMismatch {
                expected: pair[0].out_dim,
                actual: pair[1].in_dim,
            });
        }
    }
    Ok(())
}

pub fn forward_path(layers: &[&DenseLayer], x: &[f64]) -> Result<Vec<f64>> {
    check_path(layers, x)?;
    let mut cur = x.to_vec();
    let mut pre = Vec::new();
    let mut out = Vec::new();
    for layer in layers {
        layer.forward_into(&cur, &mut pre, &mut out);
        std::mem::swap(&mut cur, &mut out);
    }
    Ok(cur)
}

pub fn forward_traced(layers: &[&DenseLayer], x: &[f64]) -> Result<ForwardTrace> {
    check_path(layers, x)?;
    let mut trace = ForwardTrace {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
        outputs: Vec::with_capacity(layers.len()),
    };
    let mut cur = x.to_vec();
    for layer in layers {
        let mut pre = Vec::with_capacity(layer.out_dim);
        let mut out = Vec::with_capacity(layer.out_dim);
        layer.forward_into(&cur, &mut pre, &mut out);
        trace.inputs.push(cur);
        trace.pre.push(pre);
        cur = out.clone();
        trace.outputs.push(out);
    }
    Ok(trace)
}

/// Backpropagates `grad_out` (dL/d output) through a traced path and
/// accumulates parameter gradients into `grads[i]` for every layer with
/// `trainable[i]`. Propagation stops below the lowest trainable layer.
pub fn backward_path(
    layers: &[&DenseLayer],
    trace: &ForwardTrace,
    grad_out: &[f64],
    trainable: &[bool],
    grads: &mut [Option<LayerGrad>],
) -> Result<()> {
    let n = layers.len();
    if trainable.len() != n || grads.len() != n || trace.outputs.len() != n {
        return Err(PearlError::DimensionMismatch {
            expected: n,
            actual: trainable.len(),
        });
    }
    let last = layers[n - 1];
    if grad_out.len() != last.out_dim {
        return Err(PearlError::DimensionMismatch {
            expected: last.out_dim,
            actual: grad_out.len(),
        });
    }
    let Some(lowest) = trainable.iter().position(|t| *t) else {
        return Ok(());
    };
    let mut upstream = grad_out.to_vec();
    for i in (lowest..n).rev() {
        let layer = layers[i];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[i])
            .zip(&trace.outputs[i])
            .map(|((g, z), y)| g * layer.activation.derivative(*z, *y))
            .collect();
        let input = &trace.inputs[i];
        if trainable[i] {
            let grad = grads[i].get_or_insert_with(|| LayerGrad::zeros_like(layer));
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grad.bias[o] += d;
                let row = &mut grad.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
        }
        if i > lowest {
            let mut next = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (acc, w) in next.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
            upstream = next;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Bce,
}

impl LossKind {
    /// Loss averaged over output elements, and its gradient with respect to the output.
    pub fn value_and_grad(self, output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        if output.len() != target.len() {
            return Err(PearlError::DimensionMismatch {
                expected: output.len(),
                actual: target.len(),
            });
        }
        let n = output.len() as f64;
        match self {
            LossKind::Mse => {
                let mut loss = 0.0;
                let grad = output
                    .iter()
                    .zip(target)
                    .map(|(y, t)| {
                        let e = y - t;
                        loss += e * e;
                        2.0 * e / n
                    })
                    .collect();
                Ok((loss / n, grad))
            }
            LossKind::Bce => {
                if output.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
                    return Err(PearlError::InvalidArgument(
                        "binary cross-entropy requires outputs in (0,1)".into(),
                    ));
                }
                let mut loss = 0.0;
                let grad = output
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                        (p - t) / (p * (1.0 - p)) / n
                    })
                    .collect();
                Ok((loss / n, grad))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Gradient-descent optimizer. Adam moments are kept per layer slot and are
/// allocated on the slot's first update.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(PearlError::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        )
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Drops all moment state, e.g. when a new set of layers becomes trainable.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// Marks the start of one optimisation step (advances Adam's bias correction).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies `grad` to the layer stored in `slot`.
    pub fn update(&mut self, slot: usize, layer: &mut DenseLayer, grad: &LayerGrad) -> Result<()> {
        if grad.weights.len() != layer.weights.len() || grad.bias.len() != layer.bias.len() {
            return Err(PearlError::DimensionMismatch {
                expected: layer.param_count(),
                actual: grad.weights.len() + grad.bias.len(),
            });
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
                    *w -= lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                    *b -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.moments.len() <= slot {
                    self.moments.resize(slot + 1, None);
                }
                let m = self.moments[slot].get_or_insert_with(|| Moments {
                    m_w: vec![0.0; layer.weights.len()],
                    v_w: vec![0.0; layer.weights.len()],
                    m_b: vec![0.0; layer.bias.len()],
                    v_b: vec![0.0; layer.bias.len()],
                });
                if m.m_w.len() != layer.weights.len() || m.m_b.len() != layer.bias.len() {
                    return Err(PearlError::DimensionMismatch {
                        expected: m.m_w.len() + m.m_b.len(),
                        actual: layer.param_count(),
                    });
                }
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let adam = |p: &mut f64, g: f64, m1: &mut f64, m2: &mut f64| {
                    *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                    *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                    let mh = *m1 / c1;
                    let vh = *m2 / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                };
                for (((w, g), m1), m2) in layer
                    .weights
                    .iter_mut()
                    .zip(&grad.weights)
                    .zip(m.m_w.iter_mut())
                    .zip(m.v_w.iter_mut())
                {
                    adam(w, *g, m1, m2);
                }
                for (((b, g), m1), m2) in layer
                    .bias
                    .iter_mut()
                    .zip(&grad.bias)
                    .zip(m.m_b.iter_mut())
                    .zip(m.v_b.iter_mut())
                {
                    adam(b, *g, m1, m2);
                }
            }
        }
        Ok(())
    }
}

/// Set of layer slots that must not be updated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParameterMask {
    frozen: BTreeSet<usize>,
}

impl ParameterMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(count: usize) -> Self {
        Self {
            frozen: (0..count).collect(),
        }
    }

    pub fn freeze(&mut self, slot: usize) {
        self.frozen.insert(slot);
    }

    pub fn unfreeze(&mut self, slot: usize) {
        self.frozen.remove(&slot);
    }

    pub fn is_frozen(&self, slot: usize) -> bool {
        self.frozen.contains(&slot)
    }

    pub fn frozen(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().copied()
    }
}

/// A plain sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    layers: Vec<DenseLayer>,
}

impl DenseStack {
    /// Builds a stack with `dims = [in, h1, ..., out]`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(PearlError::InvalidArgument("empty stack".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(PearlError::DimensionMismatch {
                    expected: pair[0].out_dim,
                    actual: pair[1].in_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn refs(&self) -> Vec<&DenseLayer> {
        self.layers.iter().collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_path(&self.refs(), x)
    }

    /// Loss and per-layer gradients for one sample (all layers treated as trainable).
    pub fn gradients(
        &self,
        x: &[f64],
        target: &[f64],
        loss: LossKind,
    ) -> Result<(f64, Vec<LayerGrad>)> {
        let refs = self.refs();
        let trace = forward_traced(&refs, x)?;
        let (value, grad_out) = loss.value_and_grad(trace.output(), target)?;
        let mut grads = vec![None; refs.len()];
        backward_path(&refs, &trace, &grad_out, &vec![true; refs.len()], &mut grads)?;
        let grads = grads
            .into_iter()
            .zip(&self.layers)
            .map(|(g, l)| g.unwrap_or_else(|| LayerGrad::zeros_like(l)))
            .collect();
        Ok((value, grads))
    }

    /// One optimisation step on a single sample.
    pub fn backward_and_step(
        &mut self,
        x: &[f64],
        target: &[f64],
        loss: LossKind,
        mask: &ParameterMask,
        optimizer: &mut Optimizer,
    ) -> Result<f64> {
        self.train_batch(&[x.to_vec()], &[target.to_vec()], loss, mask, optimizer)
    }

    /// One optimisation step on the mean loss of a batch; returns the mean loss.
    pub fn train_batch(
        &mut self,
        xs: &[Vec<f64>],
        targets: &[Vec<f64>],
        loss: LossKind,
        mask: &ParameterMask,
        optimizer: &mut Optimizer,
    ) -> Result<f64> {
        if xs.is_empty() || xs.len() != targets.len() {
            return Err(PearlError::DimensionMismatch {
                expected: xs.len(),
                actual: targets.len(),
            });
        }
        if targets[0].len() != self.output_dim() {
            return Err(PearlError::DimensionMismatch {
                expected: self.output_dim(),
                actual: targets[0].len(),
            });
        }
        let trainable: Vec<bool> = (0..self.layers.len()).map(|i| !mask.is_frozen(i)).collect();
        let mut grads: Vec<Option<LayerGrad>> = vec![None; self.layers.len()];
        let mut total = 0.0;
        {
            let refs = self.refs();
            for (x, t) in xs.iter().zip(targets) {
                let trace = forward_traced(&refs, x)?;
                let (value, grad_out) = loss.value_and_grad(trace.output(), t)?;
                total += value;
                backward_path(&refs, &trace, &grad_out, &trainable, &mut grads)?;
            }
        }
        let mean = total / xs.len() as f64;
        if !mean.is_finite() {
            return Err(PearlError::Divergence {
                loss: mean,
                context: "dense stack training step".into(),
            });
        }
        optimizer.begin_step();
        let scale = 1.0 / xs.len() as f64;
        for (slot, grad) in grads.iter_mut().enumerate() {
            if let Some(grad) = grad {
                grad.scale(scale);
                optimizer.update(slot, &mut self.layers[slot], grad)?;
            }
        }
        Ok(mean)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_layers(&mut buf, &self.layers.iter().collect::<Vec<_>>())
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        Self::from_layers(read_layers(&mut cursor)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PEARLNN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `magic | version | layer count | (in, out, activation)* | f64 LE params*`.
pub fn write_layers<W: Write>(w: &mut W, layers: &[&DenseLayer]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for layer in layers {
        w.write_all(&(layer.in_dim as u32).to_le_bytes())?;
        w.write_all(&(layer.out_dim as u32).to_le_bytes())?;
        w.write_all(&[layer.activation.code()])?;
    }
    for layer in layers {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| PearlError::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_layers<R: Read>(r: &mut R) -> Result<Vec<DenseLayer>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| PearlError::Checkpoint(format!("missing magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(PearlError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(PearlError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)
            .map_err(|e| PearlError::Checkpoint(format!("truncated header: {e}")))?;
        let act = Activation::from_code(code[0])
            .ok_or_else(|| PearlError::Checkpoint(format!("bad activation code {}", code[0])))?;
        shapes.push((in_dim, out_dim, act));
    }
    let mut layers = Vec::with_capacity(count);
    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|e| PearlError::Checkpoint(format!("truncated parameters: {e}")))?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    for (in_dim, out_dim, act) in shapes {
        let weights = read_block(in_dim * out_dim)?;
        let bias = read_block(out_dim)?;
        layers.push(DenseLayer::from_parts(in_dim, out_dim, weights, bias, act)?);
    }
    Ok(layers)
}

/// A random vector in `[-1, 1)^n`, used by tests and benches.
pub fn random_input(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
