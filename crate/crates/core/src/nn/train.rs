use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Mlp, Mode};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::sim::stream_rng;

const SHUFFLE_STREAM: u64 = 110;
const DROPOUT_STREAM: u64 = 111;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        self.adam().validate()
    }
}

/// Optimizer and RNG state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: Adam,
    pub shuffle_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(config.adam())?,
            shuffle_rng: stream_rng(config.seed, SHUFFLE_STREAM),
            dropout_rng: stream_rng(config.seed, DROPOUT_STREAM),
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean mini-batch training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Shuffled mini-batches covering `0..n` once. A trailing batch of one row
/// is merged into the previous batch so batchnorm always sees two rows.
pub(crate) fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Mean-squared-error regression trainer.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self { config }
    }

    /// Train for `config.epochs` epochs; leaves the network in eval mode.
    pub fn fit(&self, net: &mut Mlp, inputs: &FeatureMatrix, targets: &[f64]) -> Result<FitReport> {
        let mut state = TrainState::new(&self.config)?;
        let mut losses = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            losses.push(self.train_epoch(net, &mut state, inputs, targets)?);
        }
        net.set_mode(Mode::Eval);
        Ok(FitReport { epoch_losses: losses })
    }

    /// One pass over shuffled mini-batches; returns the mean batch loss.
    pub fn train_epoch(
        &self,
        net: &mut Mlp,
        state: &mut TrainState,
        inputs: &FeatureMatrix,
        targets: &[f64],
    ) -> Result<f64> {
        if inputs.rows() != targets.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::dim("no training rows"));
        }
        if net.output_width() != 1 {
            return Err(Error::dim("regression trainer needs a scalar-output network"));
        }
        net.set_mode(Mode::Train);
        let batches = minibatches(inputs.rows(), self.config.batch_size, &mut state.shuffle_rng);
        let mut total = 0.0;
        for batch in &batches {
            let xb = inputs.select_rows(batch);
            let (pred, cache) = net.forward(&xb, Some(&mut state.dropout_rng))?;
            let b = batch.len() as f64;
            let mut loss = 0.0;
            let mut upstream = Vec::with_capacity(batch.len());
            for (&i, p) in batch.iter().zip(pred.as_slice()) {
                let r = p - targets[i];
                loss += r * r;
                upstream.push(2.0 * r / b);
            }
            loss /= b;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {}",
                    state.epoch + 1
                )));
            }
            let upstream = FeatureMatrix::from_vec(batch.len(), 1, upstream)?;
            let (grads, _) = net.backward(&cache, &upstream)?;
            if !grads.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {}",
                    state.epoch + 1
                )));
            }
            state.adam.step(net, &grads)?;
            total += loss;
        }
        state.epoch += 1;
        if !net.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after epoch {}",
                state.epoch
            )));
        }
        Ok(total / batches.len() as f64)
    }
}
