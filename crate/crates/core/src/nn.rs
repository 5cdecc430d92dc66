//! Fully connected ReLU network over a flat parameter vector.
//!
//! Parameters are stored layer by layer, each layer as a row-major weight
//! matrix `[fan_out][fan_in]` followed by its bias vector. Keeping a single
//! contiguous vector lets masks, aggregation and pruning treat the model as
//! one array while the layout records where each layer lives.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_start: usize,
    pub bias_start: usize,
}

impl Dense {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_len(&self) -> usize {
        self.fan_out
    }

    pub fn weights(&self) -> Range<usize> {
        self.weight_start..self.weight_start + self.weight_len()
    }

    pub fn biases(&self) -> Range<usize> {
        self.bias_start..self.bias_start + self.fan_out
    }

    /// Flat index of the weight connecting input `input` to output `output`.
    pub fn weight_index(&self, output: usize, input: usize) -> usize {
        self.weight_start + output * self.fan_in + input
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
    total: usize,
}

impl LayerLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Layout(format!(
                "need at least an input and an output size, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Layout(format!(
                "layer sizes must be positive, got {sizes:?}"
            )));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut offset = 0;
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight_start = offset;
            let bias_start = weight_start + fan_in * fan_out;
            offset = bias_start + fan_out;
            layers.push(Dense {
                fan_in,
                fan_out,
                weight_start,
                bias_start,
            });
        }
        Ok(Self {
            sizes,
            layers,
            total: offset,
        })
    }

    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    /// Number of weight-matrix entries (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Dense::weight_len).sum()
    }

    pub fn has_hidden_layer(&self) -> bool {
        self.sizes.len() > 2
    }

    pub fn is_weight(&self, index: usize) -> bool {
        self.layers.iter().any(|l| l.weights().contains(&index))
    }
}

/// Flat model parameters tied to the layout that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<LayerLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<LayerLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Length {
                expected: layout.total_len(),
                actual: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Mini-batch of row-major inputs with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if inputs.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} input values for {} labels of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check(&self, layout: &LayerLayout) -> Result<()> {
        if self.dim != layout.input_dim() {
            return Err(Error::Shape(format!(
                "batch dimension {} does not match network input {}",
                self.dim,
                layout.input_dim()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= layout.num_classes()) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {} classes",
                layout.num_classes()
            )));
        }
        Ok(())
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` weights, zero biases.
pub fn init_params(layout: &Arc<LayerLayout>, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(Arc::clone(layout));
    for layer in layout.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut params.values[layer.weights()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

/// Pre-activations of every layer for one batch.
struct Trace {
    pre: Vec<Vec<f64>>,
}

fn forward_trace(params: &ParamVector, batch: &Batch) -> Trace {
    let layout = params.layout();
    let n = batch.len();
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layout.layers().len());
    let mut input: Vec<f64> = batch.inputs.clone();
    let last = layout.layers().len() - 1;
    for (l, layer) in layout.layers().iter().enumerate() {
        let w = &params.values[layer.weights()];
        let b = &params.values[layer.biases()];
        let mut z = vec![0.0; n * layer.fan_out];
        for s in 0..n {
            let x = &input[s * layer.fan_in..(s + 1) * layer.fan_in];
            let out = &mut z[s * layer.fan_out..(s + 1) * layer.fan_out];
            for (o, zo) in out.iter_mut().enumerate() {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                *zo = dot(row, x) + b[o];
            }
        }
        if l < last {
            input = z.iter().map(|&v| relu(v)).collect();
        }
        pre.push(z);
    }
    Trace { pre }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logits, `batch × num_classes`, row-major.
pub fn forward(params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    batch.check(params.layout())?;
    let mut trace = forward_trace(params, batch);
    Ok(trace.pre.pop().unwrap_or_default())
}

/// Cross-entropy of one logit row against `label`.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let layout = params.layout();
    batch.check(layout)?;
    let n = batch.len();
    let trace = forward_trace(params, batch);
    let layers = layout.layers();
    let last = layers.len() - 1;
    let classes = layout.num_classes();

    let logits = &trace.pre[last];
    let mut loss = 0.0;
    let mut delta = vec![0.0; n * classes];
    let scale = 1.0 / n as f64;
    for s in 0..n {
        let row = &logits[s * classes..(s + 1) * classes];
        let label = batch.labels[s];
        let lse = log_sum_exp(row);
        loss += lse - row[label];
        let d = &mut delta[s * classes..(s + 1) * classes];
        for (c, dc) in d.iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *dc = (p - if c == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    loss *= scale;

    let mut grad = vec![0.0; layout.total_len()];
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let activations: Vec<f64> = if l == 0 {
            batch.inputs.clone()
        } else {
            trace.pre[l - 1].iter().map(|&v| relu(v)).collect()
        };
        {
            let (gw, gb) = grad[layer.weight_start..layer.bias_start + layer.fan_out]
                .split_at_mut(layer.weight_len());
            for s in 0..n {
                let a = &activations[s * layer.fan_in..(s + 1) * layer.fan_in];
                let d = &delta[s * layer.fan_out..(s + 1) * layer.fan_out];
                for (o, &d_o) in d.iter().enumerate() {
                    if d_o == 0.0 {
                        continue;
                    }
                    gb[o] += d_o;
                    let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (g, &x) in row.iter_mut().zip(a) {
                        *g += d_o * x;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.values[layer.weights()];
        let prev_pre = &trace.pre[l - 1];
        let mut prev_delta = vec![0.0; n * layer.fan_in];
        for s in 0..n {
            let d = &delta[s * layer.fan_out..(s + 1) * layer.fan_out];
            let pd = &mut prev_delta[s * layer.fan_in..(s + 1) * layer.fan_in];
            for (o, &d_o) in d.iter().enumerate() {
                if d_o == 0.0 {
                    continue;
                }
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (p, &wi) in pd.iter_mut().zip(row) {
                    *p += d_o * wi;
                }
            }
            let z = &prev_pre[s * layer.fan_in..(s + 1) * layer.fan_in];
            for (p, &zi) in pd.iter_mut().zip(z) {
                if zi <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev_delta;
    }
    Ok((loss, grad))
}

/// Mean loss and gradient over a whole dataset, accumulated in chunks.
pub fn dataset_loss_and_grad(
    params: &ParamVector,
    data: &Dataset,
    chunk: usize,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunk = chunk.max(1);
    let total = data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(chunk) {
        let batch = data.batch(part);
        let (l, g) = loss_and_grad(params, &batch)?;
        let weight = part.len() as f64 / total;
        loss += l * weight;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi * weight;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffer: Vec<f64>,
    pub momentum: f64,
    pub learning_rate: f64,
}

impl OptimizerState {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {learning_rate} must be finite and non-negative"
            )));
        }
        Ok(Self {
            momentum_buffer: vec![0.0; len],
            momentum,
            learning_rate,
        })
    }
}

/// One SGD-with-momentum step restricted to the coordinates kept by `mask`.
///
/// `buffer ← μ·buffer + grad⊙mask`, then `params ← params − lr·buffer`.
/// Masked-out coordinates receive an exact zero increment, so a parameter
/// and buffer entry that start at zero stay bitwise zero.
pub fn masked_sgd_step(
    params: &mut ParamVector,
    grad: &[f64],
    mask: &Mask,
    opt: &mut OptimizerState,
) -> Result<()> {
    let n = params.len();
    for len in [grad.len(), mask.len(), opt.momentum_buffer.len()] {
        if len != n {
            return Err(Error::Length {
                expected: n,
                actual: len,
            });
        }
    }
    let (mu, lr) = (opt.momentum, opt.learning_rate);
    for (((p, &g), &keep), buf) in params
        .values
        .iter_mut()
        .zip(grad)
        .zip(mask.bits())
        .zip(opt.momentum_buffer.iter_mut())
    {
        let g = if keep { g } else { 0.0 };
        *buf = mu * *buf + g;
        *p -= lr * *buf;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss and argmax accuracy of `params ⊙ mask` over `data`.
pub fn evaluate(
    params: &ParamVector,
    mask: &Mask,
    data: &Dataset,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let masked = crate::pruning::apply_mask(params, mask)?;
    evaluate_unmasked(&masked, data, batch_size)
}

pub(crate) fn evaluate_unmasked(
    params: &ParamVector,
    data: &Dataset,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = params.layout().num_classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(part);
        let logits = forward(params, &batch)?;
        for (row, &label) in logits.chunks(classes).zip(batch.labels()) {
            loss += cross_entropy(row, label);
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
