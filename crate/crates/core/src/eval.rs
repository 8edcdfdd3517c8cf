//! Multi-seed repetition, sweeps, and report tables.
//!
//! Every seed regenerates its dataset; all estimators and sweep points at a
//! given seed see the same draw. Cells run through [`Execution::map_range`],
//! so reports are identical under either execution policy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, dl_2sls_seeded, naive_ols, tsls, Dl2slsConfig, LinearIvSpec};
use crate::dig2rsi::{run_dig2rsi, Dig2rsiConfig, DIG2RSI};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::format_real;
use crate::linalg::{mean, sample_std};
use crate::result::EstimationResult;
use crate::sim::{gen_dataset, Dataset, GraphSpec, SemParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "2sls")]
    Tsls,
    #[serde(rename = "fn-iv")]
    FnIv,
    #[serde(rename = "loo")]
    Loo,
    #[serde(rename = "dl2sls")]
    Dl2sls,
    #[serde(rename = "dig2rsi")]
    Dig2rsi,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Naive,
        EstimatorKind::Tsls,
        EstimatorKind::FnIv,
        EstimatorKind::Loo,
        EstimatorKind::Dl2sls,
        EstimatorKind::Dig2rsi,
    ];

    /// Command-line / config key.
    pub fn key(self) -> &'static str {
        match self {
            EstimatorKind::Naive => "naive",
            EstimatorKind::Tsls => "2sls",
            EstimatorKind::FnIv => "fn-iv",
            EstimatorKind::Loo => "loo",
            EstimatorKind::Dl2sls => "dl2sls",
            EstimatorKind::Dig2rsi => "dig2rsi",
        }
    }

    /// Report label.
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Naive => baselines::NAIVE,
            EstimatorKind::Tsls => baselines::TSLS,
            EstimatorKind::FnIv => baselines::FN_IV,
            EstimatorKind::Loo => baselines::LOO,
            EstimatorKind::Dl2sls => baselines::DL_2SLS,
            EstimatorKind::Dig2rsi => DIG2RSI,
        }
    }

    pub fn supported() -> String {
        Self::ALL.map(Self::key).join(", ")
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown estimator {s:?}; supported: {}",
                    Self::supported()
                ))
            })
    }
}

/// Settings shared by every estimator in a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    /// Ridge for the linear estimators' normal equations.
    pub ridge: f64,
    pub dig2rsi: Dig2rsiConfig,
    pub dl2sls: Dl2slsConfig,
}

impl EstimatorSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) {
            return Err(Error::param("ridge must be >= 0"));
        }
        self.dig2rsi.stage1_train.validate()?;
        self.dig2rsi.stage1.with_input(1).validate()?;
        self.dig2rsi.stage2.validate()?;
        self.dig2rsi.stage2.extractor.with_input(1).validate()?;
        self.dl2sls.stage1_train.validate()?;
        self.dl2sls.stage2_train.validate()?;
        self.dl2sls.stage1.with_input(1).validate()?;
        self.dl2sls.stage2.with_input(1).validate()
    }
}

/// Run one estimator on a raw (untransformed) dataset.
pub fn run_estimator(
    kind: EstimatorKind,
    ds: &Dataset,
    settings: &EstimatorSettings,
    seed: u64,
) -> Result<EstimationResult> {
    let with_ridge = |spec: LinearIvSpec| LinearIvSpec {
        ridge: settings.ridge,
        ..spec
    };
    let mut res = match kind {
        EstimatorKind::Naive => naive_ols(ds),
        EstimatorKind::Tsls => tsls(ds, &with_ridge(LinearIvSpec::second_order())),
        EstimatorKind::FnIv => tsls(ds, &with_ridge(LinearIvSpec::fn_iv())),
        EstimatorKind::Loo => tsls(ds, &with_ridge(LinearIvSpec::leave_one_out())),
        EstimatorKind::Dl2sls => dl_2sls_seeded(ds, &settings.dl2sls, seed),
        EstimatorKind::Dig2rsi => run_dig2rsi(ds, &settings.dig2rsi, seed),
    }?;
    res.estimator = kind.label().to_string();
    Ok(res)
}

/// What to simulate for each seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    pub d: usize,
    pub graph: GraphSpec,
    pub params: SemParams,
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        gen_dataset(self.n, self.d, &self.graph, &self.params, seed)
    }

    fn with_params(&self, params: SemParams) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }
}

/// One estimator fit at one seed (and sweep point).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub estimator: String,
    pub sweep_value: Option<f64>,
    pub seed: u64,
    pub pe_hat: f64,
    pub abs_bias: f64,
    pub rel_bias: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl RunRecord {
    fn from_result(res: &EstimationResult, sweep_value: Option<f64>, seed: u64) -> Result<Self> {
        let abs_bias = res
            .abs_bias
            .ok_or_else(|| Error::param("benchmarks need simulated data with known truth"))?;
        Ok(Self {
            estimator: res.estimator.clone(),
            sweep_value,
            seed,
            pe_hat: res.pe_hat,
            abs_bias,
            rel_bias: res.rel_bias.unwrap_or(f64::NAN),
            diagnostics: res.diagnostics.clone(),
        })
    }
}

/// Mean and sample standard deviation over seeds for one estimator (and
/// sweep point).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub estimator: String,
    pub sweep_value: Option<f64>,
    pub n_seeds: usize,
    pub abs_bias_mean: f64,
    pub abs_bias_std: f64,
    pub rel_bias_mean: f64,
    pub rel_bias_std: f64,
    pub pe_mean: f64,
    pub pe_std: f64,
}

impl ReportRow {
    pub fn aggregate(runs: &[RunRecord]) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::param(format!(
                "standard deviation needs at least 2 seeds, got {}",
                runs.len()
            )));
        }
        let pick = |f: fn(&RunRecord) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
        let (abs, rel, pe) = (pick(|r| r.abs_bias), pick(|r| r.rel_bias), pick(|r| r.pe_hat));
        Ok(Self {
            estimator: runs[0].estimator.clone(),
            sweep_value: runs[0].sweep_value,
            n_seeds: runs.len(),
            abs_bias_mean: mean(&abs),
            abs_bias_std: sample_std(&abs),
            rel_bias_mean: mean(&rel),
            rel_bias_std: sample_std(&rel),
            pe_mean: mean(&pe),
            pe_std: sample_std(&pe),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    /// Name of the swept parameter, if any (`lambda_a`, `strength`).
    pub sweep: Option<String>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
    pub seeds: Vec<u64>,
    pub config: BTreeMap<String, String>,
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::param(format!(
            "standard deviation needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let unique: BTreeSet<_> = seeds.iter().collect();
    if unique.len() != seeds.len() {
        return Err(Error::param("seed list contains duplicates"));
    }
    Ok(())
}

/// Repeat an arbitrary estimator closure over seeds and aggregate.
pub fn repeat_fn<F>(name: &str, seeds: &[u64], exec: Execution, f: F) -> Result<(ReportRow, Vec<RunRecord>)>
where
    F: Fn(u64) -> Result<EstimationResult> + Sync + Send,
{
    check_seeds(seeds)?;
    let results = exec.map_range(seeds.len(), |k| f(seeds[k]));
    let mut runs = Vec::with_capacity(seeds.len());
    for (res, &seed) in results.into_iter().zip(seeds) {
        let res = res.map_err(|e| Error::Run {
            estimator: name.to_string(),
            seed,
            source: Box::new(e),
        })?;
        let mut rec = RunRecord::from_result(&res, None, seed)?;
        rec.estimator = name.to_string();
        runs.push(rec);
    }
    Ok((ReportRow::aggregate(&runs)?, runs))
}

/// One report row for `kind`, regenerating the dataset for every seed.
pub fn repeat(
    kind: EstimatorKind,
    settings: &EstimatorSettings,
    data: &DatasetSpec,
    seeds: &[u64],
    exec: Execution,
) -> Result<(ReportRow, Vec<RunRecord>)> {
    repeat_fn(kind.label(), seeds, exec, |seed| {
        run_estimator(kind, &data.generate(seed)?, settings, seed)
    })
}

/// A cell of the (sweep point x estimator x seed) grid.
struct Cell {
    point: usize,
    kind: EstimatorKind,
    seed_idx: usize,
}

/// Run every cell, then aggregate in declared order (points, then
/// estimators). `datasets[point][seed_idx]` must be pre-generated.
fn run_grid(
    points: &[Option<f64>],
    kinds: &[EstimatorKind],
    seeds: &[u64],
    datasets: &[Vec<Dataset>],
    settings_at: &(dyn Fn(usize) -> EstimatorSettings + Sync),
    exec: Execution,
) -> Result<(Vec<ReportRow>, Vec<RunRecord>)> {
    let mut cells = Vec::new();
    for point in 0..points.len() {
        for &kind in kinds {
            for seed_idx in 0..seeds.len() {
                cells.push(Cell { point, kind, seed_idx });
            }
        }
    }
    let settings: Vec<EstimatorSettings> = (0..points.len()).map(settings_at).collect();
    let results = exec.map_range(cells.len(), |k| {
        let c = &cells[k];
        let seed = seeds[c.seed_idx];
        run_estimator(c.kind, &datasets[c.point][c.seed_idx], &settings[c.point], seed)
    });
    let mut rows = Vec::new();
    let mut all_runs = Vec::with_capacity(cells.len());
    for (group_cells, group_results) in cells.chunks(seeds.len()).zip(results.chunks(seeds.len())) {
        let mut runs = Vec::with_capacity(seeds.len());
        for (c, res) in group_cells.iter().zip(group_results) {
            let seed = seeds[c.seed_idx];
            let res = res.as_ref().map_err(|e| Error::Run {
                estimator: c.kind.label().to_string(),
                seed,
                source: Box::new(clone_error(e)),
            })?;
            runs.push(RunRecord::from_result(res, points[c.point], seed)?);
        }
        rows.push(ReportRow::aggregate(&runs)?);
        all_runs.extend(runs);
    }
    Ok((rows, all_runs))
}

/// Errors are not `Clone`; keep the message and the variant where it matters.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::Singular => Error::Singular,
        Error::Divergence(m) => Error::Divergence(m.clone()),
        Error::WeakInstrument(m) => Error::WeakInstrument(m.clone()),
        Error::NonConvergence {
            iterations,
            last_change,
        } => Error::NonConvergence {
            iterations: *iterations,
            last_change: *last_change,
        },
        other => Error::ModelState(other.to_string()),
    }
}

fn generate_all(data: &[DatasetSpec], seeds: &[u64], exec: Execution) -> Result<Vec<Vec<Dataset>>> {
    let flat = exec.map_range(data.len() * seeds.len(), |k| {
        let (p, s) = (k / seeds.len(), k % seeds.len());
        data[p].generate(seeds[s]).map_err(|e| Error::Run {
            estimator: "data generation".into(),
            seed: seeds[s],
            source: Box::new(e),
        })
    });
    let mut out: Vec<Vec<Dataset>> = Vec::with_capacity(data.len());
    let mut it = flat.into_iter();
    for _ in 0..data.len() {
        out.push(it.by_ref().take(seeds.len()).collect::<Result<Vec<_>>>()?);
    }
    Ok(out)
}

fn base_config(data: &DatasetSpec, seeds: &[u64]) -> BTreeMap<String, String> {
    let mut c = BTreeMap::new();
    c.insert("n".into(), data.n.to_string());
    c.insert("d".into(), data.d.to_string());
    c.insert("beta".into(), data.params.beta.to_string());
    c.insert(
        "seeds".into(),
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
    );
    c
}

/// Bias comparison: one row per estimator, paired datasets.
pub fn benchmark(
    kinds: &[EstimatorKind],
    settings: &EstimatorSettings,
    data: &DatasetSpec,
    seeds: &[u64],
    exec: Execution,
) -> Result<BenchmarkReport> {
    if kinds.is_empty() {
        return Err(Error::param("estimator list is empty"));
    }
    check_seeds(seeds)?;
    settings.validate()?;
    let datasets = generate_all(std::slice::from_ref(data), seeds, exec)?;
    let (rows, runs) = run_grid(&[None], kinds, seeds, &datasets, &|_| settings.clone(), exec)?;
    Ok(BenchmarkReport {
        sweep: None,
        rows,
        runs,
        seeds: seeds.to_vec(),
        config: base_config(data, seeds),
    })
}

/// DIG2RSI at each adversarial weight; every grid point reuses the same
/// per-seed datasets.
pub fn lambda_sweep(
    data: &DatasetSpec,
    grid: &[f64],
    settings: &EstimatorSettings,
    seeds: &[u64],
    exec: Execution,
) -> Result<BenchmarkReport> {
    if grid.is_empty() {
        return Err(Error::param("lambda_a grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::param(format!("lambda_a grid value {bad} must be >= 0")));
    }
    check_seeds(seeds)?;
    settings.validate()?;
    let per_seed = generate_all(std::slice::from_ref(data), seeds, exec)?.remove(0);
    let datasets: Vec<Vec<Dataset>> = vec![per_seed; grid.len()];
    let points: Vec<Option<f64>> = grid.iter().copied().map(Some).collect();
    let at = |p: usize| {
        let mut s = settings.clone();
        s.dig2rsi.stage2.lambda_a = grid[p];
        s
    };
    let (rows, runs) = run_grid(&points, &[EstimatorKind::Dig2rsi], seeds, &datasets, &at, exec)?;
    let mut config = base_config(data, seeds);
    config.insert("sweep".into(), "lambda_a".into());
    Ok(BenchmarkReport {
        sweep: Some("lambda_a".into()),
        rows,
        runs,
        seeds: seeds.to_vec(),
        config,
    })
}

/// Each estimator at each confounding strength `λ = ω = s`. The graph,
/// features, confounder draw, and noise are shared across strengths.
pub fn confounder_sweep(
    data: &DatasetSpec,
    strengths: &[f64],
    kinds: &[EstimatorKind],
    settings: &EstimatorSettings,
    seeds: &[u64],
    exec: Execution,
) -> Result<BenchmarkReport> {
    if strengths.is_empty() {
        return Err(Error::param("confounder strength list is empty"));
    }
    if let Some(bad) = strengths.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::param(format!("confounder strength {bad} must be >= 0")));
    }
    if kinds.is_empty() {
        return Err(Error::param("estimator list is empty"));
    }
    check_seeds(seeds)?;
    settings.validate()?;
    let specs: Vec<DatasetSpec> = strengths
        .iter()
        .map(|&s| data.with_params(data.params.clone().with_confounding(s)))
        .collect();
    let datasets = generate_all(&specs, seeds, exec)?;
    let points: Vec<Option<f64>> = strengths.iter().copied().map(Some).collect();
    let (rows, runs) = run_grid(&points, kinds, seeds, &datasets, &|_| settings.clone(), exec)?;
    let mut config = base_config(data, seeds);
    config.insert("sweep".into(), "strength".into());
    Ok(BenchmarkReport {
        sweep: Some("strength".into()),
        rows,
        runs,
        seeds: seeds.to_vec(),
        config,
    })
}

fn opt_real(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

impl BenchmarkReport {
    pub fn row(&self, estimator: &str, sweep_value: Option<f64>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.sweep_value == sweep_value)
    }

    /// Mean of a diagnostic over the seeds of one row; NaN when absent.
    pub fn diagnostic_mean(&self, estimator: &str, sweep_value: Option<f64>, key: &str) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.estimator == estimator && r.sweep_value == sweep_value)
            .filter_map(|r| r.diagnostics.get(key).copied())
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            mean(&v)
        }
    }

    fn sweep_header(&self) -> String {
        self.sweep.as_ref().map(|s| format!("{s},")).unwrap_or_default()
    }

    fn sweep_cell(&self, v: Option<f64>) -> String {
        if self.sweep.is_some() {
            format!("{},", opt_real(v))
        } else {
            String::new()
        }
    }

    /// Aggregate table: mean and sample std of absolute bias, relative bias
    /// (%), and the estimate.
    pub fn aggregate_csv(&self) -> String {
        let mut s = format!(
            "estimator,{}n_seeds,abs_bias_mean,abs_bias_std,rel_bias_mean,rel_bias_std,pe_mean,pe_std\n",
            self.sweep_header()
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{}{},{},{},{},{},{},{}",
                r.estimator,
                self.sweep_cell(r.sweep_value),
                r.n_seeds,
                format_real(r.abs_bias_mean),
                format_real(r.abs_bias_std),
                format_real(r.rel_bias_mean),
                format_real(r.rel_bias_std),
                format_real(r.pe_mean),
                format_real(r.pe_std)
            );
        }
        s
    }

    /// One line per fit, with every diagnostic any run reported.
    pub fn runs_csv(&self) -> String {
        let keys: BTreeSet<&String> = self.runs.iter().flat_map(|r| r.diagnostics.keys()).collect();
        let mut s = format!("estimator,{}seed,pe_hat,abs_bias,rel_bias", self.sweep_header());
        for k in &keys {
            let _ = write!(s, ",diag.{k}");
        }
        s.push('\n');
        for r in &self.runs {
            let _ = write!(
                s,
                "{},{}{},{},{},{}",
                r.estimator,
                self.sweep_cell(r.sweep_value),
                r.seed,
                format_real(r.pe_hat),
                format_real(r.abs_bias),
                format_real(r.rel_bias)
            );
            for k in &keys {
                let _ = write!(s, ",{}", opt_real(r.diagnostics.get(*k).copied()));
            }
            s.push('\n');
        }
        s
    }

    /// Plot-ready long format: `estimator,sweep_value,seed,abs_bias,rel_bias,pe`.
    pub fn long_csv(&self) -> String {
        let mut s = String::from("estimator,sweep_value,seed,abs_bias,rel_bias,pe\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.estimator,
                opt_real(r.sweep_value),
                r.seed,
                format_real(r.abs_bias),
                format_real(r.rel_bias),
                format_real(r.pe_hat)
            );
        }
        s
    }

    /// Human-readable `mean ± std` table.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let sweep = self.sweep.as_deref();
        let _ = write!(s, "{:<10}", "Estimator");
        if let Some(name) = sweep {
            let _ = write!(s, " {name:>9}");
        }
        let _ = writeln!(
            s,
            " {:>21} {:>23} {:>21}",
            "Absolute Bias", "Relative Bias (%)", "PE"
        );
        for r in &self.rows {
            let _ = write!(s, "{:<10}", r.estimator);
            if sweep.is_some() {
                let _ = write!(s, " {:>9}", r.sweep_value.map(|v| format!("{v}")).unwrap_or_default());
            }
            let _ = writeln!(
                s,
                " {:>21} {:>23} {:>21}",
                format!("{:.4} ± {:.4}", r.abs_bias_mean, r.abs_bias_std),
                format!("{:.4} ± {:.4}", r.rel_bias_mean, r.rel_bias_std),
                format!("{:.4} ± {:.4}", r.pe_mean, r.pe_std)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> impl Fn(u64) -> Result<EstimationResult> + Sync + Send {
        move |_| Ok(EstimationResult::constant("K", v, 3, Some(0.5)))
    }

    #[test]
    fn constant_estimator_has_zero_std() {
        let (row, runs) = repeat_fn("K", &[1, 2, 3, 4, 5], Execution::Sequential, constant(0.3)).unwrap();
        assert_eq!(runs.len(), 5);
        assert_eq!(row.pe_std, 0.0);
        assert_eq!(row.abs_bias_std, 0.0);
        assert!((row.abs_bias_mean - 0.2).abs() < 1e-15);
    }

    #[test]
    fn single_seed_rejected() {
        assert!(repeat_fn("K", &[1], Execution::Sequential, constant(0.3)).is_err());
        assert!(repeat_fn("K", &[1, 1], Execution::Sequential, constant(0.3)).is_err());
    }

    #[test]
    fn failing_seed_is_named() {
        let f = |seed: u64| {
            if seed == 7 {
                Err(Error::Singular)
            } else {
                Ok(EstimationResult::constant("K", 0.3, 3, Some(0.5)))
            }
        };
        let err = repeat_fn("K", &[1, 7, 9], Execution::Sequential, f).unwrap_err();
        assert!(matches!(err, Error::Run { seed: 7, .. }), "{err}");
    }

    #[test]
    fn estimator_keys_parse() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.key().parse::<EstimatorKind>().unwrap(), k);
        }
        let err = "ces".parse::<EstimatorKind>().unwrap_err().to_string();
        assert!(err.contains("dig2rsi") && err.contains("naive"));
    }
}
