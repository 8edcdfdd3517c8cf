use serde::{Deserialize, Serialize};

use super::{FitReport, Mlp, MlpSpec, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_std};
use crate::matrix::FeatureMatrix;

/// Per-column z-scoring. Constant columns keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &FeatureMatrix) -> Self {
        let mut mu = Vec::with_capacity(m.cols());
        let mut scale = Vec::with_capacity(m.cols());
        for c in 0..m.cols() {
            let (a, s) = location_scale(&m.col(c));
            mu.push(a);
            scale.push(s);
        }
        Self { mean: mu, scale }
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            scale: vec![1.0; cols],
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        if m.cols() != self.mean.len() {
            return Err(Error::dim(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                m.cols()
            )));
        }
        let mut out = m.clone();
        let cols = m.cols();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            let c = k % cols;
            *v = (*v - self.mean[c]) / self.scale[c];
        }
        Ok(out)
    }
}

/// `(mean, sd)` with `sd` replaced by 1 when the vector is constant.
pub fn location_scale(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let s = if v.len() > 1 { sample_std(v) } else { 0.0 };
    (m, if s > 0.0 && s.is_finite() { s } else { 1.0 })
}

/// An [`Mlp`] trained on standardized inputs and target; predictions and
/// derivatives are reported in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledRegressor {
    pub inputs: Standardizer,
    pub net: Mlp,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl ScaledRegressor {
    pub fn fit(
        spec: &MlpSpec,
        cfg: &TrainConfig,
        x: &FeatureMatrix,
        y: &[f64],
        init_seed: u64,
    ) -> Result<(Self, FitReport)> {
        let inputs = Standardizer::fit(x);
        let (y_mean, y_scale) = location_scale(y);
        let xs = inputs.apply(x)?;
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let mut net = Mlp::new(&spec.with_input(x.cols()), init_seed)?;
        let report = Trainer::new(*cfg).fit(&mut net, &xs, &ys)?;
        Ok((
            Self {
                inputs,
                net,
                y_mean,
                y_scale,
            },
            report,
        ))
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let p = self.net.predict(&self.inputs.apply(x)?)?;
        Ok(p.into_iter().map(|v| self.y_mean + self.y_scale * v).collect())
    }

    /// Per-row derivative of the prediction with respect to input `column`.
    pub fn partial(&self, x: &FeatureMatrix, column: usize) -> Result<Vec<f64>> {
        let d = self.net.partial_wrt_input(&self.inputs.apply(x)?, column)?;
        let k = self.y_scale / self.inputs.scale[column];
        Ok(d.into_iter().map(|v| v * k).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_centers_and_scales() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&m);
        let z = s.apply(&m).unwrap();
        assert!((z.get(0, 0) + z.get(1, 0)).abs() < 1e-15);
        assert_eq!(s.scale[1], 1.0);
        assert_eq!(z.col(1), vec![0.0, 0.0]);
    }

    #[test]
    fn partial_is_in_original_units() {
        let rows: Vec<Vec<f64>> = (0..400).map(|i| vec![10.0 * (i as f64 / 400.0) + 3.0]).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| 0.25 * r[0] + 100.0).collect();
        let spec = MlpSpec::regressor(&[], false, 0.0);
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 200,
            batch_size: 50,
            ..TrainConfig::default()
        };
        let (m, _) = ScaledRegressor::fit(&spec, &cfg, &x, &y, 1).unwrap();
        let d = m.partial(&x, 0).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-3, "{}", d[0]);
    }
}
