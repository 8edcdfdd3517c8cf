//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! A hidden layer computes `dropout(act(bn(W·x + b)))`; batchnorm and dropout
//! are optional per layer. Everything is row-major with one sample per row.

mod checkpoint;
mod optim;
mod scale;
mod train;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::sim::stream_rng;

pub use optim::{Adam, AdamConfig};
pub use scale::{location_scale, ScaledRegressor, Standardizer};
pub use train::{FitReport, TrainConfig, TrainState, Trainer};
pub(crate) use train::minibatches;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture description. `hidden` widths get ReLU (plus optional
/// batchnorm/dropout); the final layer of width `output` uses
/// `output_activation` and never has batchnorm or dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    #[serde(default)]
    pub input: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "one")]
    pub output: usize,
    #[serde(default = "identity")]
    pub output_activation: Activation,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default)]
    pub dropout: f64,
}

fn one() -> usize {
    1
}

fn identity() -> Activation {
    Activation::Identity
}

impl MlpSpec {
    /// Scalar regressor: ReLU hidden layers then a linear output.
    pub fn regressor(hidden: &[usize], batchnorm: bool, dropout: f64) -> Self {
        Self {
            input: 0,
            hidden: hidden.to_vec(),
            output: 1,
            output_activation: Activation::Identity,
            batchnorm,
            dropout,
        }
    }

    /// Feature extractor: every layer ReLU, output is the last hidden width.
    pub fn extractor(hidden: &[usize], batchnorm: bool, dropout: f64) -> Self {
        let (last, rest) = hidden.split_last().expect("extractor needs a layer");
        Self {
            input: 0,
            hidden: rest.to_vec(),
            output: *last,
            output_activation: Activation::Relu,
            batchnorm,
            dropout,
        }
    }

    pub fn with_input(&self, input: usize) -> Self {
        Self {
            input,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(Error::param("layer widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// One affine layer; `weights` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub batchnorm: Option<BatchNorm>,
    pub dropout: f64,
}

impl Dense {
    /// He-normal weights, zero bias.
    fn init(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        batchnorm: bool,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
            activation,
            batchnorm: batchnorm.then(|| BatchNorm::new(outputs)),
            dropout,
        }
    }

    /// Linear layer with explicit parameters.
    pub fn linear(weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let outputs = bias.len();
        if outputs == 0 || !weights.len().is_multiple_of(outputs) || weights.is_empty() {
            return Err(Error::dim("linear layer: weights must be outputs x inputs"));
        }
        Ok(Self {
            inputs: weights.len() / outputs,
            outputs,
            weights,
            bias,
            activation: Activation::Identity,
            batchnorm: None,
            dropout: 0.0,
        })
    }
}

/// Intermediates of one layer's forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: FeatureMatrix,
    /// `W·x + b`.
    pre: FeatureMatrix,
    /// Batch statistics in train mode: (x̂, 1/sqrt(var + eps)).
    bn: Option<(FeatureMatrix, Vec<f64>)>,
    /// Post-batchnorm, pre-activation.
    normed: FeatureMatrix,
    /// Scaled keep-mask (0 or 1/(1-p)).
    mask: Option<Vec<f64>>,
}

/// Everything `backward` needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    version: u64,
}

/// Parameter gradients, same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
}

impl Gradients {
    /// Flat slices in the same order as [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
            if !l.bn_gamma.is_empty() {
                out.push(l.bn_gamma.as_slice());
                out.push(l.bn_beta.as_slice());
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    input_width: usize,
    mode: Mode,
    /// Bumped on every parameter change; caches from older versions are stale.
    version: u64,
}

impl Mlp {
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, 100);
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut width = spec.input;
        for &h in &spec.hidden {
            layers.push(Dense::init(width, h, Activation::Relu, spec.batchnorm, spec.dropout, &mut rng));
            width = h;
        }
        // An extractor's final layer is itself a hidden layer.
        let (bn, drop) = if spec.output_activation == Activation::Relu {
            (spec.batchnorm, spec.dropout)
        } else {
            (false, 0.0)
        };
        layers.push(Dense::init(width, spec.output, spec.output_activation, bn, drop, &mut rng));
        Ok(Self {
            layers,
            input_width: spec.input,
            mode: Mode::Train,
            version: 0,
        })
    }

    /// Build from explicit layers; they must chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::dim("use Mlp::identity for an empty network"))?;
        let input_width = first.inputs;
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::dim(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::dim("parameter shapes disagree with layer widths"));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::param("dropout must be in [0, 1)"));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::param("non-finite parameter"));
            }
        }
        Ok(Self {
            layers,
            input_width,
            mode: Mode::Eval,
            version: 0,
        })
    }

    /// A single linear map `x ↦ w·x + b` with scalar output.
    pub fn linear(weights: Vec<f64>, bias: f64) -> Result<Self> {
        Self::from_layers(vec![Dense::linear(weights, vec![bias])?])
    }

    /// The identity map on `width` inputs (no layers, no parameters).
    pub fn identity(width: usize) -> Self {
        Self {
            layers: Vec::new(),
            input_width: width,
            mode: Mode::Eval,
            version: 0,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, |l| l.outputs)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.batchnorm.is_some())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weights.len() + l.bias.len() + l.batchnorm.as_ref().map_or(0, |b| 2 * b.gamma.len())
            })
            .sum()
    }

    /// Mutable parameter slices: per layer `W, b[, bn_gamma, bn_beta]`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            if let Some(bn) = &mut l.batchnorm {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    /// Read-only flat copy of all trainable parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
            if let Some(bn) = &l.batchnorm {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }

    /// Eval-mode forward (no cache, no randomness). Does not change the mode.
    pub fn predict_matrix(&self, batch: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut m = self.clone();
        m.mode = Mode::Eval;
        let (out, _) = m.forward_inner(batch, None, false)?;
        Ok(out)
    }

    /// Eval-mode scalar predictions.
    pub fn predict(&self, batch: &FeatureMatrix) -> Result<Vec<f64>> {
        if self.output_width() != 1 {
            return Err(Error::dim("predict needs a scalar-output network"));
        }
        Ok(self.predict_matrix(batch)?.into_vec())
    }

    /// Forward pass in the current mode. Train mode with dropout needs `rng`;
    /// train mode updates batchnorm running statistics.
    pub fn forward(
        &mut self,
        batch: &FeatureMatrix,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(FeatureMatrix, ForwardCache)> {
        let (out, cache) = self.forward_inner(batch, rng, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_inner(
        &mut self,
        batch: &FeatureMatrix,
        mut rng: Option<&mut ChaCha8Rng>,
        keep_cache: bool,
    ) -> Result<(FeatureMatrix, Option<ForwardCache>)> {
        if batch.cols() != self.input_width {
            return Err(Error::dim(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_width
            )));
        }
        let train = self.mode == Mode::Train;
        let rows = batch.rows();
        if train && rows < 2 && self.has_batchnorm() {
            return Err(Error::dim("batchnorm in train mode needs at least 2 rows"));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let mut pre = FeatureMatrix::zeros(rows, layer.outputs);
            for r in 0..rows {
                let xr = x.row(r);
                let dst = pre.row_mut(r);
                for (o, d) in dst.iter_mut().enumerate() {
                    let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    *d = layer.bias[o] + dot(w, xr);
                }
            }
            let (normed, bn_cache) = match &mut layer.batchnorm {
                None => (pre.clone(), None),
                Some(bn) if train => {
                    let (normed, xhat, inv_std) = bn_train_forward(bn, &pre);
                    (normed, Some((xhat, inv_std)))
                }
                Some(bn) => (bn_eval_forward(bn, &pre), None),
            };
            let mut out = match layer.activation {
                Activation::Relu => normed.map(|v| v.max(0.0)),
                Activation::Identity => normed.clone(),
            };
            let mask = if train && layer.dropout > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::ModelState("dropout in train mode needs an rng".into()))?;
                let keep = 1.0 - layer.dropout;
                let scale = 1.0 / keep;
                let mask: Vec<f64> = (0..rows * layer.outputs)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                for (v, m) in out.as_mut_slice().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            } else {
                None
            };
            if keep_cache {
                caches.push(LayerCache {
                    input: x,
                    pre,
                    bn: bn_cache,
                    normed,
                    mask,
                });
            }
            x = out;
        }
        let cache = keep_cache.then(|| ForwardCache {
            layers: caches,
            version: self.version,
        });
        Ok((x, cache))
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &FeatureMatrix,
    ) -> Result<(Gradients, FeatureMatrix)> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::ModelState(
                "stale cache: parameters changed since the forward pass".into(),
            ));
        }
        if upstream.cols() != self.output_width() {
            return Err(Error::dim("upstream gradient width differs from the output width"));
        }
        let mut grad = upstream.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if grad.rows() != lc.pre.rows() {
                return Err(Error::dim("upstream gradient rows differ from the batch"));
            }
            if let Some(mask) = &lc.mask {
                for (g, m) in grad.as_mut_slice().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            if layer.activation == Activation::Relu {
                for (g, z) in grad.as_mut_slice().iter_mut().zip(lc.normed.as_slice()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (d_pre, bn_gamma, bn_beta) = match (&layer.batchnorm, &lc.bn) {
                (None, _) => (grad, Vec::new(), Vec::new()),
                (Some(bn), Some((xhat, inv_std))) => bn_train_backward(bn, &grad, xhat, inv_std),
                (Some(bn), None) => {
                    // eval mode: a fixed per-feature affine map
                    let mut dg = vec![0.0; layer.outputs];
                    let mut db = vec![0.0; layer.outputs];
                    let mut d = grad.clone();
                    for r in 0..grad.rows() {
                        for c in 0..layer.outputs {
                            let inv = 1.0 / (bn.running_var[c] + BN_EPS).sqrt();
                            let g = grad.get(r, c);
                            let xhat = (lc.pre.get(r, c) - bn.running_mean[c]) * inv;
                            dg[c] += g * xhat;
                            db[c] += g;
                            d.set(r, c, g * bn.gamma[c] * inv);
                        }
                    }
                    (d, dg, db)
                }
            };
            let mut dw = vec![0.0; layer.weights.len()];
            let mut db = vec![0.0; layer.outputs];
            let mut dx = FeatureMatrix::zeros(d_pre.rows(), layer.inputs);
            for r in 0..d_pre.rows() {
                let xr = lc.input.row(r);
                let gr = d_pre.row(r);
                let dxr = dx.row_mut(r);
                for (o, &g) in gr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    let dwo = &mut dw[o * layer.inputs..(o + 1) * layer.inputs];
                    axpy(g, xr, dwo);
                    axpy(g, w, dxr);
                }
            }
            layer_grads.push(LayerGrad {
                weights: dw,
                bias: db,
                bn_gamma,
                bn_beta,
            });
            grad = dx;
        }
        layer_grads.reverse();
        Ok((Gradients { layers: layer_grads }, grad))
    }

    /// Per-row derivative of the scalar output with respect to one input
    /// column, by a reverse pass into the inputs. Eval mode only.
    pub fn partial_wrt_input(&self, batch: &FeatureMatrix, column: usize) -> Result<Vec<f64>> {
        let g = self.input_gradient(batch)?;
        if column >= g.cols() {
            return Err(Error::dim(format!(
                "input column {column} out of range for width {}",
                g.cols()
            )));
        }
        Ok(g.col(column))
    }

    /// Gradient of the scalar output with respect to every input, per row.
    pub fn input_gradient(&self, batch: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.mode != Mode::Eval {
            return Err(Error::ModelState(
                "input derivatives need eval mode (dropout would randomize them)".into(),
            ));
        }
        if self.output_width() != 1 {
            return Err(Error::dim("input derivatives need a scalar-output network"));
        }
        let upstream = FeatureMatrix::from_vec(batch.rows(), 1, vec![1.0; batch.rows()])?;
        self.vjp_input(batch, &upstream)
    }

    /// Vector-Jacobian product into the inputs in eval mode.
    pub fn vjp_input(&self, batch: &FeatureMatrix, upstream: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut m = self.clone();
        m.mode = Mode::Eval;
        let (_, cache) = m.forward(batch, None)?;
        let (_, dx) = m.backward(&cache, upstream)?;
        Ok(dx)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn bn_train_forward(bn: &mut BatchNorm, pre: &FeatureMatrix) -> (FeatureMatrix, FeatureMatrix, Vec<f64>) {
    let (rows, cols) = (pre.rows(), pre.cols());
    let nf = rows as f64;
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        axpy(1.0, pre.row(r), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for (c, v) in pre.row(r).iter().enumerate() {
            var[c] += (v - mean[c]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = FeatureMatrix::zeros(rows, cols);
    let mut out = FeatureMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let h = (pre.get(r, c) - mean[c]) * inv_std[c];
            xhat.set(r, c, h);
            out.set(r, c, bn.gamma[c] * h + bn.beta[c]);
        }
    }
    let unbias = if rows > 1 { nf / (nf - 1.0) } else { 1.0 };
    for c in 0..cols {
        bn.running_mean[c] = (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * mean[c];
        bn.running_var[c] = (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * var[c] * unbias;
    }
    (out, xhat, inv_std)
}

fn bn_eval_forward(bn: &BatchNorm, pre: &FeatureMatrix) -> FeatureMatrix {
    let mut out = pre.clone();
    let cols = pre.cols();
    for r in 0..pre.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate().take(cols) {
            let inv = 1.0 / (bn.running_var[c] + BN_EPS).sqrt();
            *v = bn.gamma[c] * (*v - bn.running_mean[c]) * inv + bn.beta[c];
        }
    }
    out
}

/// Returns `(d_pre, d_gamma, d_beta)`.
fn bn_train_backward(
    bn: &BatchNorm,
    grad: &FeatureMatrix,
    xhat: &FeatureMatrix,
    inv_std: &[f64],
) -> (FeatureMatrix, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (grad.rows(), grad.cols());
    let nf = rows as f64;
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let g = grad.get(r, c);
            dgamma[c] += g * xhat.get(r, c);
            dbeta[c] += g;
        }
    }
    let mut d = FeatureMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            // dx = γ/(N·σ) · (N·g − Σg − x̂·Σ(g·x̂))
            let g = grad.get(r, c);
            let v = bn.gamma[c] * inv_std[c] / nf * (nf * g - dbeta[c] - xhat.get(r, c) * dgamma[c]);
            d.set(r, c, v);
        }
    }
    (d, dgamma, dbeta)
}
