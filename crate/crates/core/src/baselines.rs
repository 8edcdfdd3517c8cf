//! Comparison estimators: naive regression, linear IV (2SLS with
//! second-order, first-order-mean or leave-one-out instruments) and the
//! neural plug-in DL-2SLS.

use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dig2rsi::{default_stage1_spec, default_stage1_train, default_stage2_train, stage1_inputs};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::linalg::{least_squares, r_squared, residuals, sum_sq};
use crate::matrix::FeatureMatrix;
use crate::nn::{MlpSpec, ScaledRegressor, TrainConfig};
use crate::result::EstimationResult;
use crate::sim::Dataset;

pub const NAIVE: &str = "Naive";
pub const TSLS: &str = "2SLS";
pub const FN_IV: &str = "FN-IV";
pub const LOO: &str = "LOO";
pub const DL_2SLS: &str = "DL-2SLS";

/// Stage-1 partial R² below which instruments are flagged as weak.
pub const WEAK_INSTRUMENT_R2: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstrumentSource {
    /// `X_{G²}`.
    SecondOrder,
    /// `X_G` as excluded instrument (FN-IV); `X_G` then cannot be a control.
    FirstOrderMean,
    /// Second-order features on the network with the focal node's edges removed.
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearIvSpec {
    pub instrument_source: InstrumentSource,
    pub control_own_x: bool,
    pub control_x_g: bool,
    pub ridge: f64,
    /// Apply `(I − G)` to raw data first.
    pub transform: bool,
}

impl LinearIvSpec {
    pub fn second_order() -> Self {
        Self {
            instrument_source: InstrumentSource::SecondOrder,
            control_own_x: true,
            control_x_g: true,
            ridge: 0.0,
            transform: true,
        }
    }

    pub fn fn_iv() -> Self {
        Self {
            instrument_source: InstrumentSource::FirstOrderMean,
            control_x_g: false,
            ..Self::second_order()
        }
    }

    pub fn leave_one_out() -> Self {
        Self {
            instrument_source: InstrumentSource::LeaveOneOut,
            ..Self::second_order()
        }
    }

    pub fn label(&self) -> &'static str {
        match self.instrument_source {
            InstrumentSource::SecondOrder => TSLS,
            InstrumentSource::FirstOrderMean => FN_IV,
            InstrumentSource::LeaveOneOut => LOO,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) {
            return Err(Error::param("ridge must be >= 0"));
        }
        if self.instrument_source == InstrumentSource::FirstOrderMean && self.control_x_g {
            return Err(Error::param(
                "FN-IV uses X_G as the excluded instrument; it cannot also be a control",
            ));
        }
        Ok(())
    }
}

/// Borrow `ds` if it is already transformed (or no transform requested).
pub(crate) fn prepared(ds: &Dataset, transform: bool) -> Result<Cow<'_, Dataset>> {
    if transform && !ds.transformed {
        Ok(Cow::Owned(ds.preprocess_ig()?))
    } else {
        Ok(Cow::Borrowed(ds))
    }
}

fn ones(n: usize) -> FeatureMatrix {
    FeatureMatrix::from_vec(n, 1, vec![1.0; n]).expect("finite")
}

/// Regress `(I − G)·Y` on `(Y_G, X_G, X, 1)`; the `Y_G` coefficient is the estimate.
pub fn naive_ols(ds: &Dataset) -> Result<EstimationResult> {
    naive_ols_with(ds, true)
}

pub fn naive_ols_with(ds: &Dataset, transform: bool) -> Result<EstimationResult> {
    let ds = prepared(ds, transform)?;
    let n = ds.n();
    let yg = FeatureMatrix::column(ds.y_g.clone())?;
    let design = FeatureMatrix::hstack(&[&yg, &ds.x_g, &ds.x, &ones(n)])?;
    let coef = least_squares(&design, &ds.y, 0.0)?;
    let fit = residuals(&design, &ds.y, &coef)?;
    Ok(EstimationResult::constant(NAIVE, coef[0], n, ds.true_beta())
        .with_diagnostic("r2", 1.0 - sum_sq(&fit) / centered_ss(&ds.y)))
}

fn centered_ss(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum()
}

/// Linear two-stage least squares.
///
/// Stage 1 regresses `Y_G` on `(instruments, controls, 1)`; stage 2 regresses
/// `Y` on `(Ŷ_G, controls, 1)`.
pub fn tsls(ds: &Dataset, spec: &LinearIvSpec) -> Result<EstimationResult> {
    spec.validate()?;
    let raw_x = ds.x.clone();
    let transform_here = spec.transform && !ds.transformed;
    let ds = prepared(ds, spec.transform)?;
    let n = ds.n();
    let instruments = match spec.instrument_source {
        InstrumentSource::SecondOrder => ds.x_g2.clone(),
        InstrumentSource::FirstOrderMean => ds.x_g.clone(),
        InstrumentSource::LeaveOneOut => {
            // Built from untransformed features, then put on the same footing
            // as every other variable.
            let base = if transform_here { &raw_x } else { &ds.x };
            let z = loo_instruments(&ds.graph, base, 0..n)?;
            if transform_here {
                ds.graph.ig_transform(&z)?
            } else {
                z
            }
        }
    };
    let mut controls: Vec<&FeatureMatrix> = Vec::new();
    if spec.control_x_g {
        controls.push(&ds.x_g);
    }
    if spec.control_own_x {
        controls.push(&ds.x);
    }
    let intercept = ones(n);
    controls.push(&intercept);
    let control_block = FeatureMatrix::hstack(&controls)?;

    let stage1 = FeatureMatrix::hstack(&[&instruments, &control_block])?;
    let coef1 = least_squares(&stage1, &ds.y_g, spec.ridge).map_err(|e| match e {
        Error::Singular => Error::WeakInstrument(
            "instruments are collinear with the controls (no excluded variation)".into(),
        ),
        other => other,
    })?;
    let y_g_hat = stage1.mat_vec(&coef1)?;

    // Partial R² of the excluded instruments.
    let restricted = least_squares(&control_block, &ds.y_g, spec.ridge)?;
    let rss_r = sum_sq(&residuals(&control_block, &ds.y_g, &restricted)?);
    let rss_f = sum_sq(&residuals(&stage1, &ds.y_g, &coef1)?);
    let partial_r2 = if rss_r > 0.0 { (rss_r - rss_f) / rss_r } else { 0.0 };

    let yhat_col = FeatureMatrix::column(y_g_hat)?;
    let stage2 = FeatureMatrix::hstack(&[&yhat_col, &control_block])?;
    let coef2 = least_squares(&stage2, &ds.y, spec.ridge)?;

    let mut res = EstimationResult::constant(spec.label(), coef2[0], n, ds.true_beta())
        .with_diagnostic("stage1_partial_r2", partial_r2)
        .with_diagnostic("stage1_r2", r_squared(&ds.y_g, yhat_col.as_slice()))
        .with_diagnostic("n_instruments", instruments.cols() as f64);
    if spec.instrument_source == InstrumentSource::FirstOrderMean {
        // One excluded instrument per feature, one per endogenous slot: exactly
        // identified when d = 1.
        res = res.with_diagnostic("just_identified", f64::from(instruments.cols() == 1));
    }
    if partial_r2 < WEAK_INSTRUMENT_R2 {
        res.warnings.push(format!(
            "weak instruments: stage-1 partial R^2 = {partial_r2:.3e} < {WEAK_INSTRUMENT_R2}"
        ));
    }
    res.config
        .insert("transform".into(), spec.transform.to_string());
    res.config.insert("ridge".into(), spec.ridge.to_string());
    Ok(res)
}

/// Leave-one-out instruments.
///
/// For focal node `i`, the network `G₋ᵢ` drops every edge incident to `i`
/// and re-normalizes the rows it touched. Row `i` of the output averages,
/// over `i`'s original neighbors `j`, the neighbor mean of `X` in `G₋ᵢ`
/// (`j`'s neighbors other than `i`). A neighbor left without edges in `G₋ᵢ`
/// contributes zero; a focal node without neighbors gets the plain
/// second-order row (zero).
pub fn loo_instruments(
    g: &SparseGraph,
    x: &FeatureMatrix,
    nodes: Range<usize>,
) -> Result<FeatureMatrix> {
    if x.rows() != g.n() {
        return Err(Error::dim(format!(
            "features have {} rows, graph has {} nodes",
            x.rows(),
            g.n()
        )));
    }
    if nodes.end > g.n() {
        return Err(Error::NodeOutOfRange {
            node: nodes.end - 1,
            n: g.n(),
        });
    }
    let d = x.cols();
    let mut out = FeatureMatrix::zeros(nodes.len(), d);
    let mut acc = vec![0.0; d];
    for (r, i) in nodes.enumerate() {
        let nbrs = g.neighbors(i);
        if nbrs.is_empty() {
            continue;
        }
        let w_i = 1.0 / nbrs.len() as f64;
        let dst = out.row_mut(r);
        for &j in nbrs {
            // `i` is always among j's neighbors (undirected).
            let remaining = g.degree(j) - 1;
            if remaining == 0 {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &k in g.neighbors(j) {
                if k != i {
                    for (a, v) in acc.iter_mut().zip(x.row(k)) {
                        *a += v;
                    }
                }
            }
            let w = w_i / remaining as f64;
            for (o, a) in dst.iter_mut().zip(&acc) {
                *o += w * a;
            }
        }
    }
    Ok(out)
}

/// Network shapes and training settings for both DL-2SLS stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dl2slsConfig {
    pub stage1: MlpSpec,
    pub stage1_train: TrainConfig,
    pub stage2: MlpSpec,
    pub stage2_train: TrainConfig,
}

impl Default for Dl2slsConfig {
    fn default() -> Self {
        Self {
            stage1: default_stage1_spec(),
            stage1_train: default_stage1_train(),
            stage2: MlpSpec::regressor(&[32, 32], false, 0.0),
            stage2_train: default_stage2_train(),
        }
    }
}

/// [`dl_2sls`] with both stages seeded from one run seed.
pub fn dl_2sls_seeded(ds: &Dataset, cfg: &Dl2slsConfig, seed: u64) -> Result<EstimationResult> {
    dl_2sls(
        ds,
        &cfg.stage1,
        &cfg.stage1_train.with_seed(seed),
        &cfg.stage2,
        &cfg.stage2_train.with_seed(seed.wrapping_add(0x5EED)),
    )
}

/// Neural plug-in 2SLS: stage 1 predicts `Y_G` from `(X_{G²}, X_G, X)`;
/// stage 2 predicts `Y` from `(Ŷ_G, X_G, X)`. The estimate is the average
/// derivative of the stage-2 prediction with respect to `Ŷ_G`.
pub fn dl_2sls(
    ds: &Dataset,
    stage1: &MlpSpec,
    cfg1: &TrainConfig,
    stage2: &MlpSpec,
    cfg2: &TrainConfig,
) -> Result<EstimationResult> {
    let ds = prepared(ds, true)?;
    let n = ds.n();
    let inputs1 = stage1_inputs(&ds)?;
    let (r, fit1) = ScaledRegressor::fit(stage1, cfg1, &inputs1, &ds.y_g, cfg1.seed)?;
    let y_g_hat = r.predict(&inputs1)?;

    let yhat_col = FeatureMatrix::column(y_g_hat.clone())?;
    let inputs2 = FeatureMatrix::hstack(&[&yhat_col, &ds.x_g, &ds.x])?;
    let (f, fit2) = ScaledRegressor::fit(stage2, cfg2, &inputs2, &ds.y, cfg2.seed.wrapping_add(1))?;
    let per_node = f.partial(&inputs2, 0)?;
    let pred = f.predict(&inputs2)?;
    Ok(
        EstimationResult::from_per_node(DL_2SLS, per_node, ds.true_beta())
            .with_diagnostic("stage1_r2", r_squared(&ds.y_g, &y_g_hat))
            .with_diagnostic("stage1_loss", fit1.final_loss())
            .with_diagnostic("stage2_r2", r_squared(&ds.y, &pred))
            .with_diagnostic("stage2_loss", fit2.final_loss())
            .with_diagnostic("n", n as f64),
    )
}
