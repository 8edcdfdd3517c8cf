//! TOML run configuration. Unknown keys anywhere are rejected.
//!
//! ```toml
//! seeds = [1, 2, 3, 4, 5]
//! estimators = ["naive", "2sls", "dig2rsi"]
//! lambda_a = 0.01
//!
//! [data]
//! n = 3000
//! d = 4
//! graph = { model = "erdos_renyi", p = 0.0033 }
//!
//! [data.params]
//! confounding = 1.0
//! nonlinearity = "tanh_quadratic"
//!
//! [sweep]
//! lambda_a = [0.0, 0.01, 0.02, 0.03, 0.05, 0.08, 0.1]
//! ```

use std::path::{Path, PathBuf};

use peereffect::baselines::Dl2slsConfig;
use peereffect::dig2rsi::Dig2rsiConfig;
use peereffect::eval::{DatasetSpec, EstimatorKind, EstimatorSettings};
use peereffect::{GraphSpec, Nonlinearity, SemParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for `generate` and `estimate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Seeds for `benchmark` and `sweep`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub estimators: Vec<String>,
    /// Output directory when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Shorthand for `dig2rsi.stage2.lambda_a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_a: Option<f64>,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub dig2rsi: Dig2rsiConfig,
    #[serde(default)]
    pub dl2sls: Dl2slsConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    #[serde(default = "default_features")]
    pub d: usize,
    pub graph: GraphSpec,
    #[serde(default)]
    pub params: ParamsSection,
}

fn default_features() -> usize {
    DEFAULT_FEATURES
}

/// A coefficient given either once for every feature or per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    All(f64),
    Each(Vec<f64>),
}

impl Coef {
    fn expand(&self, d: usize, name: &str) -> Result<Vec<f64>, CliError> {
        match self {
            Coef::All(v) => Ok(vec![*v; d]),
            Coef::Each(v) if v.len() == d => Ok(v.clone()),
            Coef::Each(v) => Err(CliError::Config(format!(
                "data.params.{name} has {} entries but d = {d}",
                v.len()
            ))),
        }
    }
}

/// Structural parameters; omitted fields take [`SemParams::default_for`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Coef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Coef>,
    /// Sets both `lambda_u` and `omega`; explicit values win.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confounding: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confounder_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confounder_mixing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
}

impl ParamsSection {
    pub fn resolve(&self, d: usize) -> Result<SemParams, CliError> {
        let mut p = SemParams::default_for(d);
        if let Some(b) = self.beta {
            p.beta = b;
        }
        if let Some(g) = &self.gamma {
            p.gamma = g.expand(d, "gamma")?;
        }
        if let Some(g) = &self.delta {
            p.delta = g.expand(d, "delta")?;
        }
        if let Some(s) = self.confounding {
            p = p.with_confounding(s);
        }
        if let Some(v) = self.lambda_u {
            p.lambda_u = v;
        }
        if let Some(v) = self.omega {
            p.omega = v;
        }
        if let Some(v) = self.eps_scale {
            p.eps_scale = v;
        }
        if let Some(v) = self.confounder_scale {
            p.confounder_scale = v;
        }
        if let Some(v) = self.confounder_mixing {
            p.confounder_mixing = v;
        }
        if let Some(v) = self.nonlinearity {
            p.nonlinearity = v;
        }
        p.refresh_stage1_coefficients();
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_a: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confounder: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(GraphSpec::FromFile { path }) = cfg.data.as_mut().map(|d| &mut d.graph) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fail fast on anything downstream code would reject.
    fn check(&self) -> Result<(), CliError> {
        let cfg_err = |e: peereffect::Error| CliError::Config(e.to_string());
        self.settings().validate().map_err(cfg_err)?;
        self.kinds()?;
        if let Some(seeds) = &self.seeds {
            check_seed_list(seeds)?;
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        if let Some(d) = &self.data {
            d.dataset_spec()?;
        }
        for (name, grid) in [("lambda_a", &self.sweep.lambda_a), ("confounder", &self.sweep.confounder)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return Err(CliError::Config(format!("sweep.{name} is empty")));
                }
                if let Some(v) = g.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                    return Err(CliError::Config(format!("sweep.{name} value {v} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> EstimatorSettings {
        let mut s = EstimatorSettings {
            ridge: self.ridge,
            dig2rsi: self.dig2rsi.clone(),
            dl2sls: self.dl2sls.clone(),
        };
        if let Some(l) = self.lambda_a {
            s.dig2rsi.stage2.lambda_a = l;
        }
        s
    }

    pub fn kinds(&self) -> Result<Vec<EstimatorKind>, CliError> {
        self.estimators.iter().map(|e| parse_kind(e)).collect()
    }

    pub fn data(&self) -> Result<DatasetSpec, CliError> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [data] section".into()))?
            .dataset_spec()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec())
    }
}

impl DataSection {
    pub fn dataset_spec(&self) -> Result<DatasetSpec, CliError> {
        if self.n < 2 {
            return Err(CliError::Config("data.n must be >= 2".into()));
        }
        if self.d == 0 {
            return Err(CliError::Config("data.d must be >= 1".into()));
        }
        match &self.graph {
            GraphSpec::ErdosRenyi { p } if !(*p > 0.0 && *p <= 1.0) => {
                return Err(CliError::Config(format!("erdos_renyi p must lie in (0, 1], got {p}")));
            }
            GraphSpec::BarabasiAlbert { m } if *m == 0 => {
                return Err(CliError::Config("barabasi_albert m must be >= 1".into()));
            }
            GraphSpec::FromFile { path } if !path.is_file() => {
                return Err(CliError::Config(format!("graph file {} does not exist", path.display())));
            }
            _ => {}
        }
        Ok(DatasetSpec {
            n: self.n,
            d: self.d,
            graph: self.graph.clone(),
            params: self.params.resolve(self.d)?,
        })
    }
}

pub fn parse_kind(name: &str) -> Result<EstimatorKind, CliError> {
    name.parse().map_err(|_| {
        CliError::Config(format!(
            "unknown estimator {name:?}; supported: {}",
            EstimatorKind::supported()
        ))
    })
}

pub fn check_seed_list(seeds: &[u64]) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("seed list is empty".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config("seed list has duplicates".into()));
    }
    Ok(())
}
