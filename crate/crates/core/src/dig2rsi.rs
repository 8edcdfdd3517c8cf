//! Two-stage residual inclusion with an adversarial discriminator.
//!
//! Stage 1 regresses the transformed peer outcome `Y_G` on
//! `(X_G2, X_G, X)` and keeps the residual `V̂`. Stage 2 feeds
//! `Z = (Y_G, X_G, X, V̂)` through an extractor `φ` into a linear outcome
//! head, while a linear discriminator tries to recover `V̂` from `φ(Z)`.
//! The extractor descends `L_out − λ_a·L_disc`. The peer effect is the
//! average derivative of the outcome prediction with respect to `Y_G`.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::baselines::prepared;
use crate::error::{Error, Result};
use crate::linalg::{correlation, least_squares, r_squared};
use crate::matrix::FeatureMatrix;
use crate::nn::{
    location_scale, minibatches, Adam, AdamConfig, Mlp, MlpSpec, Mode, ScaledRegressor, Standardizer,
    TrainConfig, TrainState,
};
use crate::result::EstimationResult;
use crate::sim::{stream_rng, Dataset};

pub const DIG2RSI: &str = "DIG2RSI";
/// Position of `Y_G` in the stage-2 input `Z`.
pub const Y_G_COLUMN: usize = 0;
pub const LAMBDA_A_DEFAULT: f64 = 0.01;
pub const LAMBDA_A_GRID: [f64; 7] = [0.0, 0.01, 0.02, 0.03, 0.05, 0.08, 0.1];

const PROBE_STREAM: u64 = 300;
const PROBE_RIDGE: f64 = 1e-6;

/// `(X_G2, X_G, X)`.
pub fn stage1_inputs(ds: &Dataset) -> Result<FeatureMatrix> {
    FeatureMatrix::hstack(&[&ds.x_g2, &ds.x_g, &ds.x])
}

/// `(Y_G, X_G, X, V̂)`.
pub fn stage2_inputs(ds: &Dataset, v_hat: &[f64]) -> Result<FeatureMatrix> {
    if v_hat.len() != ds.n() {
        return Err(Error::dim(format!("{} residuals for {} nodes", v_hat.len(), ds.n())));
    }
    let y_g = FeatureMatrix::column(ds.y_g.clone())?;
    let v = FeatureMatrix::column(v_hat.to_vec())?;
    FeatureMatrix::hstack(&[&y_g, &ds.x_g, &ds.x, &v])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub model: ScaledRegressor,
    /// `V̂ = Y_G − r(X_G2, X_G, X)` in eval mode.
    pub residuals: Vec<f64>,
    pub fit_loss: f64,
    pub r2: f64,
    pub warnings: Vec<String>,
}

/// Fit the stage-1 network on an `(I − G)`-transformed dataset.
pub fn stage1_fit(ds: &Dataset, spec: &MlpSpec, cfg: &TrainConfig) -> Result<Stage1Output> {
    if !ds.transformed {
        return Err(Error::ModelState("stage 1 expects an (I - G)-transformed dataset".into()));
    }
    let mut warnings = Vec::new();
    let zero_cols = (0..ds.x_g2.cols())
        .filter(|&c| ds.x_g2.col(c).iter().all(|&v| v == 0.0))
        .count();
    if zero_cols > 0 {
        warnings.push(format!("{zero_cols} second-order instrument column(s) are identically zero"));
    }
    let inputs = stage1_inputs(ds)?;
    let (model, report) = ScaledRegressor::fit(spec, cfg, &inputs, &ds.y_g, cfg.seed)?;
    let fitted = model.predict(&inputs)?;
    let residuals: Vec<f64> = ds.y_g.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    Ok(Stage1Output {
        r2: r_squared(&ds.y_g, &fitted),
        model,
        residuals,
        fit_loss: report.final_loss(),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// One discriminator step then one main step on every mini-batch.
    #[default]
    PerBatch,
    /// A full discriminator pass, then a full main pass, each epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub extractor: MlpSpec,
    pub train: TrainConfig,
    pub lr_disc: f64,
    pub lambda_a: f64,
    pub alternation: Alternation,
    /// When false the discriminator is neither trained nor used.
    pub discriminator: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            extractor: MlpSpec::extractor(&[32, 32], false, 0.0),
            train: default_stage2_train(),
            lr_disc: 1e-2,
            lambda_a: LAMBDA_A_DEFAULT,
            alternation: Alternation::PerBatch,
            discriminator: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_a >= 0.0 && self.lambda_a.is_finite()) {
            return Err(Error::param(format!("lambda_a must be >= 0, got {}", self.lambda_a)));
        }
        self.train.validate()?;
        AdamConfig {
            lr: self.lr_disc,
            ..self.train.adam()
        }
        .validate()
    }
}

pub fn default_stage1_spec() -> MlpSpec {
    MlpSpec::regressor(&[64, 64], true, 0.1)
}

pub fn default_stage1_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 60,
        batch_size: 128,
        ..TrainConfig::default()
    }
}

pub fn default_stage2_train() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 60,
        batch_size: 128,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub outcome: f64,
    pub discriminator: f64,
}

/// Trained stage-2 networks plus the scalings they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub inputs: Standardizer,
    pub y_mean: f64,
    pub y_scale: f64,
    pub extractor: Mlp,
    pub outcome_head: Mlp,
    pub discriminator: Mlp,
    pub lambda_a: f64,
    pub history: Vec<EpochLoss>,
}

impl Stage2Model {
    /// Wrap already-built networks. Inputs are used unscaled.
    pub fn from_parts(extractor: Mlp, outcome_head: Mlp, discriminator: Mlp, lambda_a: f64) -> Result<Self> {
        let r = extractor.output_width();
        if outcome_head.input_width() != r || discriminator.input_width() != r {
            return Err(Error::dim(format!(
                "extractor emits {r} features, heads take {} and {}",
                outcome_head.input_width(),
                discriminator.input_width()
            )));
        }
        if outcome_head.output_width() != 1 || discriminator.output_width() != 1 {
            return Err(Error::dim("heads must have scalar output"));
        }
        if !(lambda_a >= 0.0) {
            return Err(Error::param("lambda_a must be >= 0"));
        }
        Ok(Self {
            inputs: Standardizer::identity(extractor.input_width()),
            y_mean: 0.0,
            y_scale: 1.0,
            extractor,
            outcome_head,
            discriminator,
            lambda_a,
            history: Vec::new(),
        })
    }

    /// Embeddings `φ(Z)` in eval mode; `z` in original units.
    pub fn embed(&self, z: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.extractor.predict_matrix(&self.inputs.apply(z)?)
    }

    /// Outcome predictions in original units.
    pub fn predict(&self, z: &FeatureMatrix) -> Result<Vec<f64>> {
        let p = self.outcome_head.predict(&self.embed(z)?)?;
        Ok(p.into_iter().map(|v| self.y_mean + self.y_scale * v).collect())
    }

    /// Per-row derivative of the outcome prediction with respect to input
    /// `column`, in original units.
    pub fn partial(&self, z: &FeatureMatrix, column: usize) -> Result<Vec<f64>> {
        if column >= z.cols() {
            return Err(Error::dim(format!("column {column} out of range for width {}", z.cols())));
        }
        let zs = self.inputs.apply(z)?;
        let h = self.extractor.predict_matrix(&zs)?;
        let mut head = self.outcome_head.clone();
        head.set_mode(Mode::Eval);
        let dh = head.input_gradient(&h)?;
        let dz = self.extractor.vjp_input(&zs, &dh)?;
        let k = self.y_scale / self.inputs.scale[column];
        Ok(dz.col(column).into_iter().map(|v| v * k).collect())
    }
}

/// Train the stage-2 extractor, outcome head, and discriminator.
pub fn stage2_fit(ds: &Dataset, v_hat: &[f64], cfg: &Stage2Config) -> Result<Stage2Model> {
    cfg.validate()?;
    let z = stage2_inputs(ds, v_hat)?;
    let inputs = Standardizer::fit(&z);
    let zs = inputs.apply(&z)?;
    let (y_mean, y_scale) = location_scale(&ds.y);
    let ys: Vec<f64> = ds.y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let v_col = z.cols() - 1;
    let vs = zs.col(v_col);

    let seed = cfg.train.seed;
    let mut extractor = Mlp::new(&cfg.extractor.with_input(z.cols()), seed.wrapping_add(1))?;
    let r = extractor.output_width();
    let head_spec = MlpSpec::regressor(&[], false, 0.0).with_input(r);
    let mut head = Mlp::new(&head_spec, seed.wrapping_add(2))?;
    let mut disc = Mlp::new(&head_spec, seed.wrapping_add(3))?;
    let mut state = TrainState::new(&cfg.train.with_seed(seed.wrapping_add(4)))?;
    let mut head_opt = Adam::new(cfg.train.adam())?;
    let mut disc_opt = Adam::new(AdamConfig {
        lr: cfg.lr_disc,
        ..cfg.train.adam()
    })?;

    let mut trainer = Stage2Trainer {
        cfg,
        zs: &zs,
        ys: &ys,
        vs: &vs,
        extractor: &mut extractor,
        head: &mut head,
        disc: &mut disc,
        head_opt: &mut head_opt,
        disc_opt: &mut disc_opt,
    };
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let batches = minibatches(zs.rows(), cfg.train.batch_size, &mut state.shuffle_rng);
        let loss = match cfg.alternation {
            Alternation::PerBatch => trainer.epoch_per_batch(&batches, &mut state)?,
            Alternation::PerEpoch => trainer.epoch_per_epoch(&batches, &mut state)?,
        };
        if !loss.outcome.is_finite() || (cfg.discriminator && !loss.discriminator.is_finite()) {
            return Err(Error::Divergence(format!("non-finite stage-2 loss at epoch {}", epoch + 1)));
        }
        history.push(loss);
    }
    extractor.set_mode(Mode::Eval);
    head.set_mode(Mode::Eval);
    disc.set_mode(Mode::Eval);
    Ok(Stage2Model {
        inputs,
        y_mean,
        y_scale,
        extractor,
        outcome_head: head,
        discriminator: disc,
        lambda_a: cfg.lambda_a,
        history,
    })
}

struct Stage2Trainer<'a> {
    cfg: &'a Stage2Config,
    zs: &'a FeatureMatrix,
    ys: &'a [f64],
    vs: &'a [f64],
    extractor: &'a mut Mlp,
    head: &'a mut Mlp,
    disc: &'a mut Mlp,
    head_opt: &'a mut Adam,
    disc_opt: &'a mut Adam,
}

/// `(mean squared error, d loss / d prediction)` for one batch.
fn mse(pred: &FeatureMatrix, target: &[f64], batch: &[usize]) -> Result<(f64, FeatureMatrix)> {
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch.len());
    for (&i, p) in batch.iter().zip(pred.as_slice()) {
        let r = p - target[i];
        loss += r * r;
        grad.push(2.0 * r / b);
    }
    Ok((loss / b, FeatureMatrix::from_vec(batch.len(), 1, grad)?))
}

fn check_grads(g: &crate::nn::Gradients, what: &str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite {what} gradient")))
    }
}

impl Stage2Trainer<'_> {
    /// θ ← θ − η_disc·∇θ L_disc on fixed embeddings.
    fn disc_step(&mut self, h: &FeatureMatrix, batch: &[usize]) -> Result<f64> {
        self.disc.set_mode(Mode::Train);
        let (pred, cache) = self.disc.forward(h, None)?;
        let (loss, up) = mse(&pred, self.vs, batch)?;
        let (g, _) = self.disc.backward(&cache, &up)?;
        check_grads(&g, "discriminator")?;
        self.disc_opt.step(self.disc, &g)?;
        Ok(loss)
    }

    /// β ← β − η₂·∇β (L_out − λ_a·L_disc) with θ frozen.
    fn main_step(&mut self, xb: &FeatureMatrix, batch: &[usize], state: &mut TrainState) -> Result<f64> {
        self.extractor.set_mode(Mode::Train);
        self.head.set_mode(Mode::Train);
        let (h, cache_e) = self.extractor.forward(xb, Some(&mut state.dropout_rng))?;
        let (pred, cache_h) = self.head.forward(&h, None)?;
        let (loss, up) = mse(&pred, self.ys, batch)?;
        let (g_head, mut dh) = self.head.backward(&cache_h, &up)?;
        if self.cfg.discriminator && self.cfg.lambda_a > 0.0 {
            let (pd, cache_d) = self.disc.forward(&h, None)?;
            let (_, up_d) = mse(&pd, self.vs, batch)?;
            let (_, dh_disc) = self.disc.backward(&cache_d, &up_d)?;
            dh = dh.lin_comb(1.0, &dh_disc, -self.cfg.lambda_a)?;
        }
        let (g_ext, _) = self.extractor.backward(&cache_e, &dh)?;
        check_grads(&g_head, "outcome head")?;
        check_grads(&g_ext, "extractor")?;
        self.head_opt.step(self.head, &g_head)?;
        state.adam.step(self.extractor, &g_ext)?;
        Ok(loss)
    }

    fn epoch_per_batch(&mut self, batches: &[Vec<usize>], state: &mut TrainState) -> Result<EpochLoss> {
        let (mut lo, mut ld) = (0.0, 0.0);
        for batch in batches {
            let xb = self.zs.select_rows(batch);
            if self.cfg.discriminator {
                // Embeddings for θ's step come from the current β; the same
                // mini-batch then drives β's step.
                let h = self.embed_train(&xb)?;
                ld += self.disc_step(&h, batch)?;
            }
            let theta = self.disc.flat_params();
            lo += self.main_step(&xb, batch, state)?;
            debug_assert_eq!(theta, self.disc.flat_params(), "discriminator moved during the main step");
        }
        let k = batches.len() as f64;
        Ok(EpochLoss {
            outcome: lo / k,
            discriminator: if self.cfg.discriminator { ld / k } else { f64::NAN },
        })
    }

    fn epoch_per_epoch(&mut self, batches: &[Vec<usize>], state: &mut TrainState) -> Result<EpochLoss> {
        let (mut lo, mut ld) = (0.0, 0.0);
        if self.cfg.discriminator {
            for batch in batches {
                let xb = self.zs.select_rows(batch);
                let h = self.embed_train(&xb)?;
                ld += self.disc_step(&h, batch)?;
            }
        }
        let theta = self.disc.flat_params();
        for batch in batches {
            let xb = self.zs.select_rows(batch);
            lo += self.main_step(&xb, batch, state)?;
        }
        debug_assert_eq!(theta, self.disc.flat_params(), "discriminator moved during the main pass");
        let k = batches.len() as f64;
        Ok(EpochLoss {
            outcome: lo / k,
            discriminator: if self.cfg.discriminator { ld / k } else { f64::NAN },
        })
    }

    /// Embeddings for the discriminator step. Computed in eval mode so the
    /// discriminator's step does not consume dropout draws or move the
    /// extractor's batchnorm statistics.
    fn embed_train(&self, xb: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.extractor.predict_matrix(xb)
    }
}

/// Per-node derivative with respect to `Y_G`; `pe_hat` is their mean.
pub fn estimate_pe(model: &Stage2Model, ds: &Dataset, v_hat: &[f64]) -> Result<EstimationResult> {
    let z = stage2_inputs(ds, v_hat)?;
    if model.inputs.mean.len() != z.cols() {
        return Err(Error::dim(format!(
            "model expects {} inputs, dataset yields {}",
            model.inputs.mean.len(),
            z.cols()
        )));
    }
    let per_node = model.partial(&z, Y_G_COLUMN)?;
    Ok(EstimationResult::from_per_node(DIG2RSI, per_node, ds.true_beta()))
}

/// Held-out R² of the best linear probe predicting `V̂` from `φ(Z)`: ridge
/// regression on standardized embeddings over a seeded half of the nodes,
/// scored on the other half.
pub fn discriminator_holdout_r2(model: &Stage2Model, z: &FeatureMatrix, v_hat: &[f64], seed: u64) -> Result<f64> {
    let raw = model.embed(z)?;
    let h = Standardizer::fit(&raw).apply(&raw)?;
    let n = h.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut stream_rng(seed, PROBE_STREAM));
    let (train, test) = idx.split_at(n / 2);
    let with_intercept = |rows: &[usize]| -> Result<FeatureMatrix> {
        let ones = FeatureMatrix::column(vec![1.0; rows.len()])?;
        FeatureMatrix::hstack(&[&h.select_rows(rows), &ones])
    };
    let d_train = with_intercept(train)?;
    let v_train: Vec<f64> = train.iter().map(|&i| v_hat[i]).collect();
    let ridge = PROBE_RIDGE * train.len() as f64;
    let coef = least_squares(&d_train, &v_train, ridge)?;
    let pred = with_intercept(test)?.mat_vec(&coef)?;
    let v_test: Vec<f64> = test.iter().map(|&i| v_hat[i]).collect();
    Ok(r_squared(&v_test, &pred))
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dig2rsiConfig {
    pub stage1: MlpSpec,
    pub stage1_train: TrainConfig,
    pub stage2: Stage2Config,
}

impl Default for Dig2rsiConfig {
    fn default() -> Self {
        Self {
            stage1: default_stage1_spec(),
            stage1_train: default_stage1_train(),
            stage2: Stage2Config::default(),
        }
    }
}

impl Dig2rsiConfig {
    pub fn with_lambda_a(mut self, lambda_a: f64) -> Self {
        self.stage2.lambda_a = lambda_a;
        self
    }

    /// Both stages' training seeds derived from one run seed.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.stage1_train.seed = seed;
        self.stage2.train.seed = seed.wrapping_add(0x5EED);
        self
    }
}

/// `preprocess_ig → stage1_fit → stage2_fit → estimate_pe`.
pub fn run_dig2rsi(ds_raw: &Dataset, cfg: &Dig2rsiConfig, seed: u64) -> Result<EstimationResult> {
    let cfg = cfg.clone().seeded(seed);
    let ds: Cow<Dataset> = prepared(ds_raw, true)?;
    let s1 = stage1_fit(&ds, &cfg.stage1, &cfg.stage1_train)?;
    let model = stage2_fit(&ds, &s1.residuals, &cfg.stage2)?;
    let mut res = estimate_pe(&model, &ds, &s1.residuals)?;
    let z = stage2_inputs(&ds, &s1.residuals)?;
    let v_std = model.inputs.apply(&z)?.col(z.cols() - 1);
    let disc_pred = model.discriminator.predict(&model.embed(&z)?)?;
    let last = model.history.last().copied();
    res = res
        .with_diagnostic("stage1_r2", s1.r2)
        .with_diagnostic("stage1_loss", s1.fit_loss)
        .with_diagnostic("stage2_loss_out", last.map_or(f64::NAN, |l| l.outcome))
        .with_diagnostic("stage2_loss_disc", last.map_or(f64::NAN, |l| l.discriminator))
        .with_diagnostic("disc_r2", r_squared(&v_std, &disc_pred))
        .with_diagnostic("disc_holdout_r2", discriminator_holdout_r2(&model, &z, &s1.residuals, seed)?)
        .with_diagnostic("lambda_a", cfg.stage2.lambda_a)
        .with_diagnostic("seed", seed as f64)
        .with_diagnostic("n", ds.n() as f64);
    if let Some(u) = &ds.u {
        res = res.with_diagnostic("corr_vhat_u", correlation(&s1.residuals, u));
    }
    res.warnings.extend(s1.warnings);
    res.config.insert("lambda_a".into(), cfg.stage2.lambda_a.to_string());
    res.config.insert("seed".into(), seed.to_string());
    res.config.insert(
        "alternation".into(),
        match cfg.stage2.alternation {
            Alternation::PerBatch => "per_batch",
            Alternation::PerEpoch => "per_epoch",
        }
        .into(),
    );
    Ok(res)
}
