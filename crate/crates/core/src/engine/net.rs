//! Dense/group-norm layer stack over flat parameter vectors, with forward
//! caching and exact backprop. Everything is f64.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GROUP_NORM_EPS: f64 = 1e-5;

/// Row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stack matrices vertically; all must share the column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts
            .first()
            .map(|m| m.cols)
            .ok_or_else(|| Error::ShapeMismatch("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {} columns onto {cols}",
                    part.cols
                )));
            }
            rows += part.rows;
            data.extend_from_slice(&part.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Copy of the given row range.
    pub fn slice_rows(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Per-sample normalization over channel groups; batch-size independent.
    GroupNorm { channels: usize, groups: usize },
}

impl LayerSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::GroupNorm { channels, .. } => *channels,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::GroupNorm { channels, .. } => *channels,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
            LayerSpec::GroupNorm { channels, .. } => 2 * channels,
        }
    }
}

/// A layer stack with a declared cut: `layers[..cut_layer]` run on clients,
/// `layers[cut_layer..]` on the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    pub cut_layer: usize,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>, cut_layer: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArchitecture("no layers".into()));
        }
        if cut_layer == 0 || cut_layer >= layers.len() {
            return Err(Error::InvalidArchitecture(format!(
                "cut layer {cut_layer} must leave at least one layer on each side"
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        for layer in &layers {
            if let LayerSpec::GroupNorm { channels, groups } = layer {
                if *groups == 0 || !channels.is_multiple_of(*groups) {
                    return Err(Error::InvalidArchitecture(format!(
                        "{groups} groups do not divide {channels} channels"
                    )));
                }
            }
        }
        Ok(Self { layers, cut_layer })
    }

    /// The default experiment network: one client-side dense+ReLU block
    /// (optionally group-normalized), then server-side dense+ReLU blocks and
    /// a linear logit layer.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        group_norm: bool,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidArchitecture(
                "at least one hidden layer is required".into(),
            ));
        }
        let mut layers = vec![LayerSpec::Dense {
            inputs: input_dim,
            outputs: hidden[0],
            activation: Activation::Relu,
        }];
        if group_norm {
            layers.push(LayerSpec::GroupNorm {
                channels: hidden[0],
                groups: default_groups(hidden[0]),
            });
        }
        let cut_layer = layers.len();
        for pair in hidden.windows(2) {
            layers.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
                activation: Activation::Relu,
            });
        }
        layers.push(LayerSpec::Dense {
            inputs: *hidden.last().unwrap(),
            outputs: classes,
            activation: Activation::Linear,
        });
        Self::new(layers, cut_layer)
    }

    pub fn client_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.cut_layer]
    }

    pub fn server_layers(&self) -> &[LayerSpec] {
        &self.layers[self.cut_layer..]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    /// Width of the activations crossing the client/server boundary.
    pub fn cut_dim(&self) -> usize {
        self.layers[self.cut_layer - 1].output_dim()
    }

    pub fn client_param_count(&self) -> usize {
        self.client_layers()
            .iter()
            .map(LayerSpec::param_count)
            .sum()
    }

    pub fn server_param_count(&self) -> usize {
        self.server_layers()
            .iter()
            .map(LayerSpec::param_count)
            .sum()
    }
}

fn default_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// He-style uniform fan-in initialization: dense weights from
/// U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero, norm scales one.
pub fn init_params(layers: &[LayerSpec], rng: &mut impl Rng) -> Vec<f64> {
    let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::param_count).sum());
    for layer in layers {
        match layer {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                let limit = (6.0 / *inputs as f64).sqrt();
                for _ in 0..inputs * outputs {
                    params.push(rng.random_range(-limit..limit));
                }
                params.extend(std::iter::repeat_n(0.0, *outputs));
            }
            LayerSpec::GroupNorm { channels, .. } => {
                params.extend(std::iter::repeat_n(1.0, *channels));
                params.extend(std::iter::repeat_n(0.0, *channels));
            }
        }
    }
    params
}

enum LayerCache {
    Dense {
        input: Matrix,
        pre_activation: Matrix,
    },
    GroupNorm {
        normalized: Matrix,
        // One inverse standard deviation per (sample, group).
        inv_std: Vec<f64>,
    },
}

/// Intermediates of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    caches: Vec<LayerCache>,
    batch_rows: usize,
}

impl ForwardCache {
    pub fn batch_rows(&self) -> usize {
        self.batch_rows
    }
}

/// Run the stack over `input` (one sample per row), returning the output and
/// the cache needed for backprop.
pub fn forward(layers: &[LayerSpec], params: &[f64], input: &Matrix) -> (Matrix, ForwardCache) {
    debug_assert_eq!(
        params.len(),
        layers.iter().map(LayerSpec::param_count).sum::<usize>()
    );
    let mut caches = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    let mut offset = 0;
    for layer in layers {
        let layer_params = &params[offset..offset + layer.param_count()];
        offset += layer.param_count();
        current = match layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => {
                let (weights, biases) = layer_params.split_at(inputs * outputs);
                let mut pre = Matrix::zeros(current.rows(), *outputs);
                for n in 0..current.rows() {
                    let x = current.row(n);
                    let z = pre.row_mut(n);
                    for o in 0..*outputs {
                        let w = &weights[o * inputs..(o + 1) * inputs];
                        let mut acc = biases[o];
                        for i in 0..*inputs {
                            acc += w[i] * x[i];
                        }
                        z[o] = acc;
                    }
                }
                let mut out = pre.clone();
                if *activation == Activation::Relu {
                    for v in &mut out.data {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                caches.push(LayerCache::Dense {
                    input: current,
                    pre_activation: pre,
                });
                out
            }
            LayerSpec::GroupNorm { channels, groups } => {
                let (gamma, beta) = layer_params.split_at(*channels);
                let group_size = channels / groups;
                let mut normalized = Matrix::zeros(current.rows(), *channels);
                let mut inv_std = Vec::with_capacity(current.rows() * groups);
                let mut out = Matrix::zeros(current.rows(), *channels);
                for n in 0..current.rows() {
                    let x = current.row(n);
                    for g in 0..*groups {
                        let span = g * group_size..(g + 1) * group_size;
                        let mean = x[span.clone()].iter().sum::<f64>() / group_size as f64;
                        let var = x[span.clone()]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>()
                            / group_size as f64;
                        let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                        inv_std.push(inv);
                        for c in span {
                            let xhat = (x[c] - mean) * inv;
                            normalized.row_mut(n)[c] = xhat;
                            out.row_mut(n)[c] = gamma[c] * xhat + beta[c];
                        }
                    }
                }
                caches.push(LayerCache::GroupNorm {
                    normalized,
                    inv_std,
                });
                out
            }
        };
    }
    let batch_rows = input.rows();
    (current, ForwardCache { caches, batch_rows })
}

/// Backpropagate `grad_output` through the stack, returning the gradients of
/// every parameter and of the stack's input.
pub fn backward(
    layers: &[LayerSpec],
    params: &[f64],
    cache: &ForwardCache,
    grad_output: &Matrix,
) -> (Vec<f64>, Matrix) {
    let total: usize = layers.iter().map(LayerSpec::param_count).sum();
    let mut param_grads = vec![0.0; total];
    let mut grad = grad_output.clone();
    let mut offset = total;
    for (layer, layer_cache) in layers.iter().zip(&cache.caches).rev() {
        offset -= layer.param_count();
        let layer_params = &params[offset..offset + layer.param_count()];
        let layer_grads = &mut param_grads[offset..offset + layer.param_count()];
        grad = match (layer, layer_cache) {
            (
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                },
                LayerCache::Dense {
                    input,
                    pre_activation,
                },
            ) => {
                let weights = &layer_params[..inputs * outputs];
                let (weight_grads, bias_grads) = layer_grads.split_at_mut(inputs * outputs);
                let mut grad_in = Matrix::zeros(input.rows(), *inputs);
                for n in 0..input.rows() {
                    let x = input.row(n);
                    let z = pre_activation.row(n);
                    let dy = grad.row(n);
                    for o in 0..*outputs {
                        let dz = match activation {
                            Activation::Linear => dy[o],
                            Activation::Relu => {
                                if z[o] > 0.0 {
                                    dy[o]
                                } else {
                                    0.0
                                }
                            }
                        };
                        if dz == 0.0 {
                            continue;
                        }
                        bias_grads[o] += dz;
                        let w = &weights[o * inputs..(o + 1) * inputs];
                        let wg = &mut weight_grads[o * inputs..(o + 1) * inputs];
                        let gi = grad_in.row_mut(n);
                        for i in 0..*inputs {
                            wg[i] += dz * x[i];
                            gi[i] += dz * w[i];
                        }
                    }
                }
                grad_in
            }
            (
                LayerSpec::GroupNorm { channels, groups },
                LayerCache::GroupNorm {
                    normalized,
                    inv_std,
                },
            ) => {
                let gamma = &layer_params[..*channels];
                let (gamma_grads, beta_grads) = layer_grads.split_at_mut(*channels);
                let group_size = channels / groups;
                let mut grad_in = Matrix::zeros(grad.rows(), *channels);
                for n in 0..grad.rows() {
                    let dy = grad.row(n);
                    let xhat = normalized.row(n);
                    for c in 0..*channels {
                        gamma_grads[c] += dy[c] * xhat[c];
                        beta_grads[c] += dy[c];
                    }
                    for g in 0..*groups {
                        let span = g * group_size..(g + 1) * group_size;
                        let inv = inv_std[n * groups + g];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in span.clone() {
                            let dxhat = dy[c] * gamma[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat[c];
                        }
                        let m = group_size as f64;
                        let gi = grad_in.row_mut(n);
                        for c in span {
                            let dxhat = dy[c] * gamma[c];
                            gi[c] = inv / m * (m * dxhat - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                        }
                    }
                }
                grad_in
            }
            _ => unreachable!("cache kind always matches its layer"),
        };
    }
    (param_grads, grad)
}

/// Mean cross-entropy of softmax(logits) against the labels, and its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows against {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let z = logits.row(r);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in z {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss += log_sum - z[label];
        let g = grad.row_mut(r);
        for c in 0..classes {
            let p = (z[c] - log_sum).exp();
            g[c] = (p - f64::from(c == label)) / n;
        }
    }
    Ok((loss / n, grad))
}
