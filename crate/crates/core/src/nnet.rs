//! Dense feed-forward networks trained from scratch: forward pass,
//! backpropagation, ADAM with L2 regularisation, autoencoders and the
//! clustered autoencoder.
//!
//! A layer maps a batch of rows `x` to `g(x W + b)`, with `W` stored as an
//! `input x output` matrix. Training minimises the mean squared error over
//! all entries of the batch plus `l2 * Σ W²` (biases are not penalised).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterAssignment;
use crate::linalg;
use crate::scalar::Scalar;
use crate::seed::substream_seed;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("need at least {needed} rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("cluster {0} has no columns")]
    EmptyCluster(usize),
    #[error("unsupported model document: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Gelu,
    Selu,
    Swish,
}

const SELU_SCALE: f64 = 1.0507;
const SELU_NEG_SCALE: f64 = 1.7581;

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Gelu,
        Activation::Selu,
        Activation::Swish,
    ];

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Gelu => T::lit(0.5) * x * (T::one() + (x / T::lit(2f64.sqrt())).error_fn()),
            Activation::Selu => {
                if x >= T::zero() {
                    T::lit(SELU_SCALE) * x
                } else {
                    T::lit(SELU_NEG_SCALE) * x.exp_m1()
                }
            }
            Activation::Swish => x / (T::one() + (-x).exp()),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x / T::lit(2f64.sqrt())).error_fn());
                let pdf = (-(x * x) / T::lit(2.0)).exp() / T::lit((2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
            Activation::Selu => {
                if x >= T::zero() {
                    T::lit(SELU_SCALE)
                } else {
                    T::lit(SELU_NEG_SCALE) * x.exp()
                }
            }
            Activation::Swish => {
                let sig = T::one() / (T::one() + (-x).exp());
                sig + x * sig * (T::one() - sig)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Gelu => "gelu",
            Activation::Selu => "selu",
            Activation::Swish => "swish",
        })
    }
}

impl FromStr for Activation {
    type Err = NnetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" | "none" => Ok(Activation::Identity),
            "gelu" => Ok(Activation::Gelu),
            "selu" => Ok(Activation::Selu),
            "swish" => Ok(Activation::Swish),
            other => Err(NnetError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation, bias: bool) -> Self {
        Self {
            input,
            output,
            activation,
            bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub spec: LayerSpec,
    /// `input x output`.
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    /// Glorot-uniform weights in `±√(6 / (in + out))`, zero biases.
    pub fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Self {
        let limit = (6.0 / (spec.input + spec.output) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((spec.input, spec.output), || {
            T::lit(rng.random_range(-limit..=limit))
        });
        Self {
            spec,
            weights,
            bias: Array1::zeros(spec.output),
        }
    }

    fn pre_activation(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&self.weights);
        if self.spec.bias {
            z += &self.bias;
        }
        z
    }
}

/// Inputs and pre-activations of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub inputs: Vec<Array2<T>>,
    pub pre_activations: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub bias: Vec<Array1<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Flattened in the same order as [`Mlp::parameters`].
    pub fn flatten(&self, net: &Mlp<T>) -> Vec<T> {
        let mut out = Vec::new();
        for (l, layer) in net.layers.iter().enumerate() {
            out.extend(self.weights[l].iter().copied());
            if layer.spec.bias {
                out.extend(self.bias[l].iter().copied());
            }
        }
        out
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self, NnetError> {
        validate_specs(specs)?;
        Ok(Self {
            layers: specs.iter().map(|&s| Dense::init(s, rng)).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self, NnetError> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        validate_specs(&specs)?;
        for l in &layers {
            if l.weights.dim() != (l.spec.input, l.spec.output) || l.bias.len() != l.spec.output {
                return Err(NnetError::Shape("layer parameters do not match spec".into()));
            }
        }
        Ok(Self { layers })
    }

    /// Hidden layers of the given widths with one activation, then a linear
    /// output layer.
    pub fn dense<R: Rng>(
        input: usize,
        hidden: &[usize],
        activation: Activation,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NnetError> {
        Self::new(&chain_specs(input, hidden, activation, output, bias), rng)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].spec.input
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    fn check_input(&self, x: ArrayView2<T>) -> Result<(), NnetError> {
        if x.ncols() != self.input_size() {
            return Err(NnetError::Shape(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>), NnetError> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut current = x.to_owned();
        for layer in &self.layers {
            let z = layer.pre_activation(current.view());
            let act = layer.spec.activation;
            let h = z.mapv(|v| act.apply(v));
            cache.inputs.push(current);
            cache.pre_activations.push(z);
            current = h;
        }
        Ok((current, cache))
    }

    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>, NnetError> {
        self.check_input(x)?;
        let mut current = x.to_owned();
        for layer in &self.layers {
            let act = layer.spec.activation;
            current = layer.pre_activation(current.view()).mapv(|v| act.apply(v));
        }
        Ok(current)
    }

    /// `Σ W²` over all weight matrices.
    pub fn weight_norm_sq(&self) -> T {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|&w| w * w).sum::<T>())
            .sum()
    }

    /// Objective `mean((out - target)²) + l2 Σ W²` and its gradient.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<T>,
        target: ArrayView2<T>,
        l2: T,
    ) -> Result<(T, Gradients<T>), NnetError> {
        let (out, cache) = self.forward(x)?;
        if out.dim() != target.dim() {
            return Err(NnetError::Shape(format!(
                "output {:?} vs target {:?}",
                out.dim(),
                target.dim()
            )));
        }
        let count = T::from_count(out.len());
        let diff = &out - &target;
        let mse = diff.iter().map(|&v| v * v).sum::<T>() / count;
        let loss = mse + l2 * self.weight_norm_sq();

        let two = T::lit(2.0);
        let mut delta = diff.mapv(|v| two * v / count);
        let n_layers = self.layers.len();
        let mut grad_w = vec![Array2::<T>::zeros((0, 0)); n_layers];
        let mut grad_b = vec![Array1::<T>::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let act = layer.spec.activation;
            let mut dz = delta;
            if act != Activation::Identity {
                dz.zip_mut_with(&cache.pre_activations[l], |d, &z| *d *= act.derivative(z));
            }
            let mut gw = cache.inputs[l].t().dot(&dz);
            if l2 != T::zero() {
                gw.scaled_add(two * l2, &layer.weights);
            }
            grad_w[l] = gw;
            grad_b[l] = if layer.spec.bias {
                dz.sum_axis(Axis(0))
            } else {
                Array1::zeros(layer.spec.output)
            };
            delta = dz.dot(&layer.weights.t());
        }
        Ok((
            loss,
            Gradients {
                weights: grad_w,
                bias: grad_b,
            },
        ))
    }

    /// All trainable parameters: per layer, weights row-major then biases
    /// (if the layer has them).
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            if layer.spec.bias {
                out.extend(layer.bias.iter().copied());
            }
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[T]) -> Result<(), NnetError> {
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = it.next().ok_or_else(|| NnetError::Shape("too few parameters".into()))?;
            }
            if layer.spec.bias {
                for b in layer.bias.iter_mut() {
                    *b = it.next().ok_or_else(|| NnetError::Shape("too few parameters".into()))?;
                }
            }
        }
        if it.next().is_some() {
            return Err(NnetError::Shape("too many parameters".into()));
        }
        Ok(())
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    input: l.spec.input,
                    output: l.spec.output,
                    activation: l.spec.activation,
                    bias: l.spec.bias,
                    weights: l.weights.iter().map(|v| v.as_f64()).collect(),
                    biases: l.bias.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &NetworkDocument) -> Result<Self, NnetError> {
        let layers = doc
            .layers
            .iter()
            .map(|l| {
                let spec = LayerSpec::new(l.input, l.output, l.activation, l.bias);
                let weights = Array2::from_shape_vec(
                    (l.input, l.output),
                    l.weights.iter().map(|&v| T::lit(v)).collect(),
                )
                .map_err(|e| NnetError::Format(e.to_string()))?;
                if l.biases.len() != l.output {
                    return Err(NnetError::Format("bias length".into()));
                }
                let bias = l.biases.iter().map(|&v| T::lit(v)).collect();
                Ok(Dense {
                    spec,
                    weights,
                    bias,
                })
            })
            .collect::<Result<Vec<_>, NnetError>>()?;
        Self::from_layers(layers)
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), NnetError> {
    if specs.is_empty() {
        return Err(NnetError::Config("network has no layers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input == 0 || s.output == 0 {
            return Err(NnetError::Config(format!("layer {i} has a zero size")));
        }
        if i > 0 && specs[i - 1].output != s.input {
            return Err(NnetError::Config(format!(
                "layer {i} input {} does not match previous output {}",
                s.input,
                specs[i - 1].output
            )));
        }
    }
    Ok(())
}

/// Layer specs for `input → hidden… (activation) → output (identity)`.
pub fn chain_specs(
    input: usize,
    hidden: &[usize],
    activation: Activation,
    output: usize,
    bias: bool,
) -> Vec<LayerSpec> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    let last = sizes.len() - 2;
    (0..=last)
        .map(|i| {
            let act = if i == last { Activation::Identity } else { activation };
            LayerSpec::new(sizes[i], sizes[i + 1], act, bias)
        })
        .collect()
}

/// Shape of an encoder or decoder: hidden widths sharing one activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

impl HiddenSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            widths,
            activation,
            bias: true,
        }
    }

    /// No hidden layers, no biases: a purely linear map.
    pub fn linear() -> Self {
        Self {
            widths: Vec::new(),
            activation: Activation::Identity,
            bias: false,
        }
    }

    /// Per-cluster encoder of the clustered autoencoder: width 10, Swish.
    pub fn clustered_encoder_default() -> Self {
        Self::new(vec![10], Activation::Swish)
    }

    /// Joint decoder of the clustered autoencoder: width 60, Swish.
    pub fn clustered_decoder_default() -> Self {
        Self::new(vec![60], Activation::Swish)
    }

    /// Human-readable layer description such as `10 / swish`.
    pub fn describe(&self) -> String {
        if self.widths.is_empty() {
            return "linear".to_string();
        }
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("{} / {}", widths.join(" / "), self.activation)
    }
}

/// Autoencoder: the first `encoder_depth` layers map the input to the code,
/// the remaining layers map the code back to the input space.
#[derive(Debug, Clone, PartialEq)]
pub struct AeNetwork<T> {
    net: Mlp<T>,
    encoder_depth: usize,
}

impl<T: Scalar> AeNetwork<T> {
    /// Encoder `input → hidden… → bottleneck`; the decoder mirrors the
    /// hidden widths in reverse order back to `input`.
    pub fn new<R: Rng>(
        input: usize,
        bottleneck: usize,
        hidden: &HiddenSpec,
        rng: &mut R,
    ) -> Result<Self, NnetError> {
        let mut specs = chain_specs(input, &hidden.widths, hidden.activation, bottleneck, hidden.bias);
        let encoder_depth = specs.len();
        let rev: Vec<usize> = hidden.widths.iter().rev().copied().collect();
        specs.extend(chain_specs(bottleneck, &rev, hidden.activation, input, hidden.bias));
        let net = Mlp::new(&specs, rng)?;
        Self::from_parts(net, encoder_depth)
    }

    pub fn from_parts(net: Mlp<T>, encoder_depth: usize) -> Result<Self, NnetError> {
        if encoder_depth == 0 || encoder_depth >= net.layers.len() {
            return Err(NnetError::Config("encoder depth must leave a decoder".into()));
        }
        if net.output_size() != net.input_size() {
            return Err(NnetError::Config("decoder output must match encoder input".into()));
        }
        Ok(Self { net, encoder_depth })
    }

    pub fn network(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn into_network(self) -> Mlp<T> {
        self.net
    }

    pub fn bottleneck(&self) -> usize {
        self.net.layers[self.encoder_depth - 1].spec.output
    }

    pub fn encoder(&self) -> Mlp<T> {
        Mlp {
            layers: self.net.layers[..self.encoder_depth].to_vec(),
        }
    }

    pub fn decoder(&self) -> Mlp<T> {
        Mlp {
            layers: self.net.layers[self.encoder_depth..].to_vec(),
        }
    }

    pub fn forward(&self, batch: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>), NnetError> {
        self.net.forward(batch)
    }

    pub fn encode(&self, batch: ArrayView2<T>) -> Result<Array2<T>, NnetError> {
        self.encoder().predict(batch)
    }

    pub fn reconstruct(&self, batch: ArrayView2<T>) -> Result<Array2<T>, NnetError> {
        self.net.predict(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub l2: f64,
    /// Chronological hold-out taken from the end of the data.
    pub validation_fraction: Option<f64>,
    /// Epochs without improvement of the monitored loss before stopping.
    pub early_stop_patience: Option<usize>,
    /// After early stopping on the hold-out, retrain from the same
    /// initial weights on all rows for the selected number of epochs.
    pub refit_on_full: bool,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            batch_size: 64,
            step_size: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            l2: 0.0,
            validation_fraction: Some(0.2),
            early_stop_patience: Some(25),
            refit_on_full: true,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.batch_size == 0 {
            return Err(NnetError::Config("batch size must be >= 1".into()));
        }
        if let Some(f) = self.validation_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(NnetError::Config(format!(
                    "validation fraction {f} outside (0, 1)"
                )));
            }
        }
        if !(self.step_size > 0.0) || !(self.l2 >= 0.0) {
            return Err(NnetError::Config("step size must be > 0 and l2 >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(NnetError::Config("ADAM betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Same configuration with the seed replaced by a named substream.
    pub fn substream(&self, name: &str) -> Self {
        Self {
            seed: substream_seed(self.seed, name),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    /// Training MSE plus the L2 penalty.
    pub train_objective: f64,
    pub val_mse: Option<f64>,
}

pub fn write_epoch_log<W: Write>(log: &[EpochRecord], writer: W) -> Result<(), NnetError> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "epoch,train_mse,train_objective,val_mse")?;
    for r in log {
        let val = r.val_mse.map(|v| format!("{v:.16e}")).unwrap_or_default();
        writeln!(w, "{},{:.16e},{:.16e},{}", r.epoch, r.train_mse, r.train_objective, val)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub network: Mlp<T>,
    pub train_mse: T,
    pub val_mse: Option<T>,
    /// MSE of the final network over every row.
    pub full_mse: T,
    /// Epochs of the selection run (with hold-out, when configured).
    pub log: Vec<EpochRecord>,
    /// Epochs of the full-data refit, when one was run.
    pub refit_log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Adam<T> {
    m_w: Vec<Array2<T>>,
    v_w: Vec<Array2<T>>,
    m_b: Vec<Array1<T>>,
    v_b: Vec<Array1<T>>,
    step: i32,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Scalar> Adam<T> {
    fn new(net: &Mlp<T>, config: &TrainConfig) -> Self {
        Self {
            m_w: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            v_w: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            m_b: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            v_b: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            step: 0,
            lr: T::lit(config.step_size),
            beta1: T::lit(config.adam_beta1),
            beta2: T::lit(config.adam_beta2),
            eps: T::lit(config.adam_epsilon),
        }
    }

    fn update(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let rule = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| rule(p, m, v, g));
            if layer.spec.bias {
                ndarray::Zip::from(&mut layer.bias)
                    .and(&mut self.m_b[l])
                    .and(&mut self.v_b[l])
                    .and(&grads.bias[l])
                    .for_each(|p, m, v, &g| rule(p, m, v, g));
            }
        }
    }
}

/// Mean squared error over all entries.
pub fn mse<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> T {
    let count = T::from_count(a.len().max(1));
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / count
}

fn network_mse<T: Scalar>(net: &Mlp<T>, x: ArrayView2<T>, y: ArrayView2<T>) -> Result<T, NnetError> {
    Ok(mse(net.predict(x)?.view(), y))
}

struct RunResult<T> {
    network: Mlp<T>,
    log: Vec<EpochRecord>,
    best_epoch: usize,
}

/// Core loop: `epochs` passes over `(x, y)`, monitoring `val` when given.
#[allow(clippy::too_many_arguments)]
fn run_epochs<T: Scalar>(
    mut net: Mlp<T>,
    x: ArrayView2<T>,
    y: ArrayView2<T>,
    val: Option<(ArrayView2<T>, ArrayView2<T>)>,
    config: &TrainConfig,
    epochs: usize,
    patience: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<RunResult<T>, NnetError> {
    let n = x.nrows();
    let l2 = T::lit(config.l2);
    let mut adam = Adam::new(&net, config);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, Mlp<T>)> = None;
    let mut stale = 0usize;
    let full_batch = config.batch_size >= n;
    for epoch in 1..=epochs {
        if config.shuffle && !full_batch {
            order.shuffle(rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let (loss, grads) = if full_batch {
                net.loss_and_gradient(x, y, l2)?
            } else {
                let bx = x.select(Axis(0), chunk);
                let by = y.select(Axis(0), chunk);
                net.loss_and_gradient(bx.view(), by.view(), l2)?
            };
            if !loss.is_finite() {
                return Err(NnetError::Divergence {
                    epoch,
                    loss: loss.as_f64(),
                });
            }
            adam.update(&mut net, &grads);
        }
        let train_mse = network_mse(&net, x, y)?.as_f64();
        let objective = train_mse + config.l2 * net.weight_norm_sq().as_f64();
        let val_mse = match val {
            Some((vx, vy)) => Some(network_mse(&net, vx, vy)?.as_f64()),
            None => None,
        };
        if !objective.is_finite() || val_mse.is_some_and(|v| !v.is_finite()) {
            return Err(NnetError::Divergence {
                epoch,
                loss: objective,
            });
        }
        log.push(EpochRecord {
            epoch,
            train_mse,
            train_objective: objective,
            val_mse,
        });
        if let Some(p) = patience {
            let monitored = val_mse.unwrap_or(objective);
            if best.as_ref().is_none_or(|(b, _, _)| monitored < *b) {
                best = Some((monitored, epoch, net.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }
    match best {
        Some((_, epoch, snapshot)) => Ok(RunResult {
            network: snapshot,
            log,
            best_epoch: epoch,
        }),
        None => {
            let last = log.len();
            Ok(RunResult {
                network: net,
                log,
                best_epoch: last,
            })
        }
    }
}

/// Trains `network` to map `inputs` to `targets`.
///
/// With a validation fraction the last rows are held out, training stops
/// early when the hold-out MSE has not improved for `early_stop_patience`
/// epochs, and the best epoch's weights are kept. With `refit_on_full` the
/// network is then retrained from its initial weights on all rows for the
/// selected number of epochs. Results are a deterministic function of the
/// seed, the configuration and the data.
///
/// Requires at least `2 * batch_size` rows, unless the batch covers every
/// row (full-batch mode).
pub fn train_mapping<T: Scalar>(
    network: &Mlp<T>,
    inputs: ArrayView2<T>,
    targets: ArrayView2<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, NnetError> {
    config.validate()?;
    let n = inputs.nrows();
    if targets.nrows() != n {
        return Err(NnetError::Shape(format!(
            "{n} input rows but {} target rows",
            targets.nrows()
        )));
    }
    if inputs.ncols() != network.input_size() || targets.ncols() != network.output_size() {
        return Err(NnetError::Shape("data does not match network sizes".into()));
    }
    // a batch covering every row is full-batch mode and needs only two rows
    let needed = if config.batch_size >= n { 2 } else { 2 * config.batch_size };
    if n < needed {
        return Err(NnetError::InsufficientRows { needed, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    match config.validation_fraction {
        Some(frac) => {
            let n_val = ((n as f64) * frac).round() as usize;
            let n_train = n - n_val;
            if n_val == 0 || n_train < 1 {
                return Err(NnetError::InsufficientRows { needed: 2, got: n });
            }
            let (tx, vx) = inputs.split_at(Axis(0), n_train);
            let (ty, vy) = targets.split_at(Axis(0), n_train);
            let selection = run_epochs(
                network.clone(),
                tx,
                ty,
                Some((vx, vy)),
                config,
                config.max_epochs,
                config.early_stop_patience,
                &mut rng,
            )?;
            let val_mse = network_mse(&selection.network, vx, vy)?;
            if config.refit_on_full {
                let mut refit_rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "refit"));
                let refit = run_epochs(
                    network.clone(),
                    inputs,
                    targets,
                    None,
                    config,
                    selection.best_epoch,
                    None,
                    &mut refit_rng,
                )?;
                let full_mse = network_mse(&refit.network, inputs, targets)?;
                Ok(TrainOutcome {
                    train_mse: full_mse,
                    val_mse: Some(val_mse),
                    full_mse,
                    network: refit.network,
                    log: selection.log,
                    refit_log: refit.log,
                    best_epoch: selection.best_epoch,
                })
            } else {
                let train_mse = network_mse(&selection.network, tx, ty)?;
                let full_mse = network_mse(&selection.network, inputs, targets)?;
                Ok(TrainOutcome {
                    network: selection.network,
                    train_mse,
                    val_mse: Some(val_mse),
                    full_mse,
                    log: selection.log,
                    refit_log: Vec::new(),
                    best_epoch: selection.best_epoch,
                })
            }
        }
        None => {
            let run = run_epochs(
                network.clone(),
                inputs,
                targets,
                None,
                config,
                config.max_epochs,
                config.early_stop_patience,
                &mut rng,
            )?;
            let full_mse = network_mse(&run.network, inputs, targets)?;
            Ok(TrainOutcome {
                network: run.network,
                train_mse: full_mse,
                val_mse: None,
                full_mse,
                log: run.log,
                refit_log: Vec::new(),
                best_epoch: run.best_epoch,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct AeTrainOutcome<T> {
    pub network: AeNetwork<T>,
    pub train_mse: T,
    pub val_mse: Option<T>,
    pub full_mse: T,
    pub log: Vec<EpochRecord>,
    pub refit_log: Vec<EpochRecord>,
}

/// Trains an autoencoder to reconstruct the rows of `data`.
pub fn train<T: Scalar>(
    network: &AeNetwork<T>,
    data: ArrayView2<T>,
    config: &TrainConfig,
) -> Result<AeTrainOutcome<T>, NnetError> {
    let out = train_mapping(&network.net, data, data, config)?;
    Ok(AeTrainOutcome {
        network: AeNetwork::from_parts(out.network, network.encoder_depth)?,
        train_mse: out.train_mse,
        val_mse: out.val_mse,
        full_mse: out.full_mse,
        log: out.log,
        refit_log: out.refit_log,
    })
}

/// Per-cluster encoders (bottleneck 1) feeding a joint decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredAe<T> {
    encoders: Vec<Mlp<T>>,
    decoder: Mlp<T>,
    assignment: ClusterAssignment,
}

impl<T: Scalar> ClusteredAe<T> {
    pub fn new(
        encoders: Vec<Mlp<T>>,
        decoder: Mlp<T>,
        assignment: ClusterAssignment,
    ) -> Result<Self, NnetError> {
        let k = assignment.n_clusters();
        if encoders.len() != k {
            return Err(NnetError::Shape(format!("{} encoders for {k} clusters", encoders.len())));
        }
        for (c, enc) in encoders.iter().enumerate() {
            let size = assignment.members(c + 1).len();
            if size == 0 {
                return Err(NnetError::EmptyCluster(c + 1));
            }
            if enc.input_size() != size || enc.output_size() != 1 {
                return Err(NnetError::Shape(format!(
                    "encoder {} maps {} -> {}, cluster has {size} columns",
                    c + 1,
                    enc.input_size(),
                    enc.output_size()
                )));
            }
        }
        if decoder.input_size() != k || decoder.output_size() != assignment.labels().len() {
            return Err(NnetError::Shape("joint decoder must map K codes to d outputs".into()));
        }
        Ok(Self {
            encoders,
            decoder,
            assignment,
        })
    }

    pub fn encoders(&self) -> &[Mlp<T>] {
        &self.encoders
    }

    pub fn decoder(&self) -> &Mlp<T> {
        &self.decoder
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn n_codes(&self) -> usize {
        self.encoders.len()
    }

    /// Code names, one per cluster.
    pub fn code_labels(&self) -> &[String] {
        self.assignment.names()
    }

    pub fn reconstruct(&self, rows: ArrayView2<T>) -> Result<Array2<T>, NnetError> {
        let codes = encode_clustered(self, rows)?;
        self.decoder.predict(codes.view())
    }

    pub fn to_document(&self) -> ClusteredAeDocument {
        ClusteredAeDocument {
            format_version: FORMAT_VERSION,
            kind: "clustered_ae".to_string(),
            labels: self.assignment.labels().to_vec(),
            cluster_ids: self.assignment.ids().to_vec(),
            cluster_names: self.assignment.names().to_vec(),
            encoders: self.encoders.iter().map(Mlp::to_document).collect(),
            decoder: self.decoder.to_document(),
        }
    }

    pub fn from_document(doc: &ClusteredAeDocument) -> Result<Self, NnetError> {
        if doc.format_version != FORMAT_VERSION || doc.kind != "clustered_ae" {
            return Err(NnetError::Format(format!(
                "kind {:?} version {}",
                doc.kind, doc.format_version
            )));
        }
        let assignment = ClusterAssignment::from_raw(
            doc.labels.clone(),
            &doc.cluster_ids,
            Some(doc.cluster_names.iter().cloned().enumerate().map(|(i, n)| (i + 1, n)).collect()),
        );
        if assignment.ids() != doc.cluster_ids.as_slice() {
            return Err(NnetError::Format("cluster ids are not canonically numbered".into()));
        }
        let encoders = doc
            .encoders
            .iter()
            .map(Mlp::from_document)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(encoders, Mlp::from_document(&doc.decoder)?, assignment)
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<(), NnetError> {
        serde_json::to_writer_pretty(writer, &self.to_document())?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self, NnetError> {
        let doc: ClusteredAeDocument = serde_json::from_reader(reader)?;
        Self::from_document(&doc)
    }
}

/// Codes of every cluster: column `k` is encoder `k` applied to the columns
/// of cluster `k + 1`.
pub fn encode_clustered<T: Scalar>(
    cae: &ClusteredAe<T>,
    rows: ArrayView2<T>,
) -> Result<Array2<T>, NnetError> {
    let d = cae.assignment.labels().len();
    if rows.ncols() != d {
        return Err(NnetError::Shape(format!(
            "rows have {} columns, model expects {d}",
            rows.ncols()
        )));
    }
    let mut codes = Array2::<T>::zeros((rows.nrows(), cae.n_codes()));
    for (c, enc) in cae.encoders.iter().enumerate() {
        let cols = cae.assignment.members(c + 1);
        let sub = rows.select(Axis(1), &cols);
        let code = enc.predict(sub.view())?;
        codes.column_mut(c).assign(&code.column(0));
    }
    Ok(codes)
}

#[derive(Debug, Clone)]
pub struct ClusteredAeFit<T> {
    pub model: ClusteredAe<T>,
    /// Reconstruction MSE of the full model over every entry.
    pub full_mse: T,
    /// Full-data MSE of each phase-one autoencoder on its own cluster.
    pub cluster_mse: Vec<T>,
    pub decoder_log: Vec<EpochRecord>,
}

/// Two-phase fit: one bottleneck-1 autoencoder per cluster, then a joint
/// decoder trained on the frozen, sign-oriented codes.
///
/// Each code is oriented so that it correlates non-negatively with the mean
/// of its cluster's columns, by negating the final (linear) encoder layer.
pub fn fit_clustered_ae<T: Scalar>(
    data: ArrayView2<T>,
    assignment: &ClusterAssignment,
    encoder_spec: &HiddenSpec,
    decoder_spec: &HiddenSpec,
    config: &TrainConfig,
) -> Result<ClusteredAeFit<T>, NnetError> {
    let d = assignment.labels().len();
    if data.ncols() != d {
        return Err(NnetError::Shape(format!(
            "data has {} columns, assignment covers {d}",
            data.ncols()
        )));
    }
    let k = assignment.n_clusters();
    let mut encoders = Vec::with_capacity(k);
    let mut cluster_mse = Vec::with_capacity(k);
    for c in 1..=k {
        let cols = assignment.members(c);
        if cols.is_empty() {
            return Err(NnetError::EmptyCluster(c));
        }
        let sub = data.select(Axis(1), &cols);
        let cfg = config.substream(&format!("cae/cluster/{c}"));
        let mut init_rng = ChaCha8Rng::seed_from_u64(substream_seed(cfg.seed, "init"));
        let ae = AeNetwork::new(cols.len(), 1, encoder_spec, &mut init_rng)?;
        let trained = train(&ae, sub.view(), &cfg)?;
        let mut encoder = trained.network.encoder();
        orient_code(&mut encoder, sub.view())?;
        cluster_mse.push(trained.full_mse);
        encoders.push(encoder);
    }

    let partial = ClusteredAe {
        encoders,
        decoder: Mlp::dense(
            k,
            &decoder_spec.widths,
            decoder_spec.activation,
            d,
            decoder_spec.bias,
            &mut ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "cae/decoder/init")),
        )?,
        assignment: assignment.clone(),
    };
    let codes = encode_clustered(&partial, data)?;
    let cfg = config.substream("cae/decoder");
    let trained = train_mapping(&partial.decoder, codes.view(), data, &cfg)?;
    let model = ClusteredAe::new(partial.encoders, trained.network, assignment.clone())?;
    let full_mse = mse(model.reconstruct(data)?.view(), data);
    Ok(ClusteredAeFit {
        model,
        full_mse,
        cluster_mse,
        decoder_log: trained.log,
    })
}

fn orient_code<T: Scalar>(encoder: &mut Mlp<T>, sub: ArrayView2<T>) -> Result<(), NnetError> {
    let last = encoder.layers.len() - 1;
    if encoder.layers[last].spec.activation != Activation::Identity {
        return Err(NnetError::Config("final encoder layer must be linear".into()));
    }
    let code = encoder.predict(sub)?;
    let mean_return = sub.mean_axis(Axis(1)).expect("non-empty cluster");
    let mut both = Array2::<T>::zeros((sub.nrows(), 2));
    both.column_mut(0).assign(&code.column(0));
    both.column_mut(1).assign(&mean_return);
    let cov = linalg::sample_covariance(both.view());
    if cov[[0, 1]] < T::zero() {
        let layer = &mut encoder.layers[last];
        layer.weights.mapv_inplace(|v| -v);
        layer.bias.mapv_inplace(|v| -v);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub bias: bool,
    /// Row-major `input x output`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub layers: Vec<LayerDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredAeDocument {
    pub format_version: u32,
    pub kind: String,
    pub labels: Vec<String>,
    pub cluster_ids: Vec<usize>,
    pub cluster_names: Vec<String>,
    pub encoders: Vec<NetworkDocument>,
    pub decoder: NetworkDocument,
}
