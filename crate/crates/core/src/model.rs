//! Feed-forward classifier with a confidence output.
//!
//! The class distribution is the softmax of the final logits. The confidence
//! is the Boltzmann operator applied to that distribution, a smooth maximum
//! that stays differentiable with respect to every parameter.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, NodeId, Tape};
use crate::{Error, Result, Tensor};

pub const DEFAULT_BETA: f64 = 10.0;

/// Random-stream id used for parameter initialisation.
pub(crate) const INIT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_layer_sizes: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub boltzmann_beta: f64,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_layer_sizes: Vec<usize>, num_classes: usize) -> Self {
        MlpArchitecture {
            input_dim,
            hidden_layer_sizes,
            num_classes,
            activation: Activation::Relu,
            boltzmann_beta: DEFAULT_BETA,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.boltzmann_beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidArchitecture("input_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArchitecture("num_classes must be at least 2"));
        }
        if self.hidden_layer_sizes.contains(&0) {
            return Err(Error::InvalidArchitecture(
                "hidden layers must be non-empty",
            ));
        }
        if !(self.boltzmann_beta > 0.0) || !self.boltzmann_beta.is_finite() {
            return Err(Error::InvalidArchitecture(
                "boltzmann_beta must be positive and finite",
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.hidden_layer_sizes.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.hidden_layer_sizes);
        sizes.push(self.num_classes);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Weights and biases of every layer. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn zeros(arch: &MlpArchitecture) -> Self {
        MlpParams {
            layers: arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| DenseLayer {
                    weight: Tensor::zeros(&[i, o]),
                    bias: Tensor::zeros(&[o]),
                })
                .collect(),
        }
    }

    /// Flat list `[w0, b0, w1, b1, ...]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.layers
            .into_iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if !tensors.len().is_multiple_of(2) {
            return Err(Error::SizeMismatch {
                expected: tensors.len() + 1,
                got: tensors.len(),
            });
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(DenseLayer { weight, bias });
        }
        Ok(MlpParams { layers })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that layer shapes chain from `input_dim` to `num_classes`.
    pub fn check(&self, arch: &MlpArchitecture) -> Result<()> {
        let dims = arch.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::SizeMismatch {
                expected: dims.len(),
                got: self.layers.len(),
            });
        }
        for (layer, (i, o)) in self.layers.iter().zip(dims) {
            if layer.weight.shape() != [i, o] || layer.bias.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "params",
                    left: vec![i, o],
                    right: layer.weight.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &MlpParams) -> Result<()> {
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() {
            return Err(Error::SizeMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        for (x, y) in a.iter().zip(&b) {
            if x.shape() != y.shape() {
                return Err(Error::ShapeMismatch {
                    op: "params",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_leaves(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    pub fn to_constants(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                })
                .collect(),
        }
    }
}

/// Tape handles for each layer's `(weight, bias)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn from_ids(ids: &[NodeId]) -> Self {
        ParamNodes {
            layers: ids.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }

    pub fn values(&self, tape: &Tape) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| DenseLayer {
                    weight: tape.value(w).clone(),
                    bias: tape.value(b).clone(),
                })
                .collect(),
        }
    }
}

/// Uniform Glorot initialisation, zero biases. Deterministic per seed.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> MlpParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    MlpParams {
        layers: arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                DenseLayer {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], data),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect(),
    }
}

/// Boltzmann smooth maximum `sum p_i e^{b p_i} / sum e^{b p_i}`.
///
/// Lies between the mean and the maximum of `probs` and is non-decreasing
/// in `beta`.
pub fn boltzmann_mcp(probs: &[f64], beta: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("boltzmann_mcp"));
    }
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::InvalidArgument(alloc::format!("beta = {beta}")));
    }
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for &p in probs {
        let e = libm::exp(beta * (p - max));
        num += p * e;
        den += e;
    }
    let out = num / den;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite {
            op: "boltzmann_mcp",
        })
    }
}

/// Boltzmann confidence of each row of a `[n, C]` probability node.
///
/// The row maximum used for stabilisation enters as a constant: the operator
/// is invariant to that shift, so no gradient is lost.
pub fn boltzmann_on_tape(tape: &mut Tape, probs: NodeId, beta: f64) -> Result<NodeId> {
    let p = tape.value(probs);
    let cols = p.cols();
    let shift: Vec<f64> = (0..p.rows())
        .flat_map(|r| {
            let m = p.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            core::iter::repeat_n(m, cols)
        })
        .collect();
    let shift = tape.constant(Tensor::from_parts(p.shape().to_vec(), shift));
    let centred = tape.sub(probs, shift)?;
    let scaled = tape.scale(centred, beta)?;
    let e = tape.exp(scaled)?;
    let weighted = tape.mul(probs, e)?;
    let num = tape.sum_rows(weighted)?;
    let den = tape.sum_rows(e)?;
    tape.div(num, den)
}

/// Nodes produced by a batched forward pass over `[n, input_dim]` features.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    /// `[n, C]`
    pub logits: NodeId,
    /// `[n, C]`
    pub probs: NodeId,
    /// `[n]`
    pub confidence: NodeId,
}

pub fn logits_on_tape(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    params: &ParamNodes,
    features: NodeId,
) -> Result<NodeId> {
    let x = tape.value(features);
    if x.rank() != 2 || x.cols() != arch.input_dim {
        return Err(Error::SizeMismatch {
            expected: arch.input_dim,
            got: x.cols(),
        });
    }
    let mut h = features;
    let last = params.layers.len().saturating_sub(1);
    for (k, &(w, b)) in params.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = if k == last {
            z
        } else {
            match arch.activation {
                Activation::Relu => tape.relu(z)?,
                Activation::Tanh => tape.tanh(z)?,
            }
        };
    }
    Ok(h)
}

pub fn forward_batch(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    params: &ParamNodes,
    features: NodeId,
) -> Result<BatchForward> {
    let logits = logits_on_tape(tape, arch, params, features)?;
    let probs = tape.softmax(logits)?;
    let confidence = boltzmann_on_tape(tape, probs, arch.boltzmann_beta)?;
    Ok(BatchForward {
        logits,
        probs,
        confidence,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

/// Forward pass for a single feature vector. The confidence node returned
/// alongside the output is differentiable with respect to the parameter
/// nodes.
pub fn forward(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    params: &ParamNodes,
    x: &[f64],
) -> Result<(ModelOutput, NodeId)> {
    if x.len() != arch.input_dim {
        return Err(Error::SizeMismatch {
            expected: arch.input_dim,
            got: x.len(),
        });
    }
    let features = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let out = forward_batch(tape, arch, params, features)?;
    let probs = tape.value(out.probs).data().to_vec();
    let output = ModelOutput {
        predicted_class: argmax(&probs),
        confidence: tape.value(out.confidence).data()[0],
        probs,
    };
    Ok((output, out.confidence))
}

/// Value-only predictions for every row of `features`.
pub fn predict(
    arch: &MlpArchitecture,
    params: &MlpParams,
    features: &Tensor,
) -> Result<Vec<ModelOutput>> {
    let mut tape = Tape::new();
    let nodes = params.to_constants(&mut tape);
    let x = tape.constant(features.clone());
    let out = forward_batch(&mut tape, arch, &nodes, x)?;
    let probs = tape.value(out.probs);
    let conf = tape.value(out.confidence);
    Ok((0..probs.rows())
        .map(|r| {
            let row = probs.row(r).to_vec();
            ModelOutput {
                predicted_class: argmax(&row),
                confidence: conf.data()[r],
                probs: row,
            }
        })
        .collect())
}

/// Rewrites the first layer so the network accepts raw features when it was
/// trained on `(x - mean) / scale`.
pub fn fold_standardization(params: &MlpParams, mean: &[f64], scale: &[f64]) -> Result<MlpParams> {
    let mut out = params.clone();
    let Some(first) = out.layers.first_mut() else {
        return Ok(out);
    };
    let (fan_in, fan_out) = (first.weight.shape()[0], first.weight.shape()[1]);
    if mean.len() != fan_in || scale.len() != fan_in {
        return Err(Error::SizeMismatch {
            expected: fan_in,
            got: mean.len(),
        });
    }
    let w = first.weight.data();
    let mut weight = vec![0.0; fan_in * fan_out];
    let mut bias = first.bias.data().to_vec();
    for i in 0..fan_in {
        for j in 0..fan_out {
            let scaled = w[i * fan_out + j] / scale[i];
            weight[i * fan_out + j] = scaled;
            bias[j] -= mean[i] * scaled;
        }
    }
    first.weight = Tensor::new(vec![fan_in, fan_out], weight)?;
    first.bias = Tensor::new(vec![fan_out], bias)?;
    Ok(out)
}
