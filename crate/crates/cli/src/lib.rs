//! Command implementations behind the `peereffect` binary.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use peereffect::eval::{benchmark, confounder_sweep, lambda_sweep, run_estimator, BenchmarkReport};
use peereffect::io::{read_dataset, write_atomic, write_dataset};
use peereffect::{Error, Execution};
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const LONG_FILE: &str = "long.csv";
pub const TABLE_FILE: &str = "table.txt";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or usage; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running; exit code 1.
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Run(Error::InvalidParameter(_)) => EXIT_USAGE,
            CliError::Run(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    LambdaA,
    Confounder,
}

impl std::str::FromStr for SweepKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "lambda_a" => Ok(SweepKind::LambdaA),
            "confounder" => Ok(SweepKind::Confounder),
            other => Err(CliError::Config(format!(
                "unknown sweep kind {other:?}; supported: lambda_a, confounder"
            ))),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub threads: Option<usize>,
}

impl Overrides {
    /// Fold the flags into the configuration so the echoed config is what ran.
    pub fn apply(&self, cfg: &mut RunConfig) -> CliResult<()> {
        if let Some(s) = &self.seeds {
            config::check_seed_list(s)?;
            cfg.seed = Some(s[0]);
            cfg.seeds = Some(s.clone());
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(CliError::Config("--threads must be >= 1".into()));
            }
            cfg.threads = Some(t);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(())
    }
}

fn execution(cfg: &RunConfig) -> Execution {
    match cfg.threads {
        Some(1) => Execution::Sequential,
        Some(t) => {
            peereffect::exec::init_threads(t);
            Execution::Parallel
        }
        None => Execution::Parallel,
    }
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&dir.join(CONFIG_ECHO_FILE), text.as_bytes())?;
    Ok(())
}

/// Simulate one dataset into the output directory; returns the summary line.
pub fn cmd_generate(cfg: &RunConfig) -> CliResult<String> {
    let spec = cfg.data()?;
    let dir = out_dir(cfg)?;
    let seed = cfg.seed.unwrap_or(config::DEFAULT_SEEDS[0]);
    let ds = spec.generate(seed)?;
    write_dataset(&ds, &dir, Some(&spec.graph))?;
    echo_config(cfg, &dir)?;
    Ok(format!(
        "wrote {}: n {} edges {} spectral_bound {:.4} beta {}",
        dir.display(),
        ds.n(),
        ds.graph.edge_count(),
        ds.graph.spectral_radius_upper_bound(),
        spec.params.beta
    ))
}

/// Fit one estimator on a dataset directory. Result files go to the output
/// directory when one is configured, else into the dataset directory.
pub fn cmd_estimate(cfg: &RunConfig, data_dir: &Path, estimator: &str) -> CliResult<String> {
    let kind = config::parse_kind(estimator)?;
    let ds = read_dataset(data_dir)?;
    let seed = cfg.seed.unwrap_or(config::DEFAULT_SEEDS[0]);
    let res = run_estimator(kind, &ds, &cfg.settings(), seed)?;
    let dir = cfg.out.clone().unwrap_or_else(|| data_dir.to_path_buf());
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    let stem = kind.key();
    res.write(
        &dir.join(format!("{stem}_result.txt")),
        Some(&dir.join(format!("{stem}_per_node.csv"))),
    )?;
    let mut s = format!("{} pe_hat {:.6}", res.estimator, res.pe_hat);
    if let (Some(a), Some(r)) = (res.abs_bias, res.rel_bias) {
        let _ = write!(s, " abs_bias {a:.6} rel_bias {r:.4}%");
    } else if let Some(a) = res.abs_bias {
        let _ = write!(s, " abs_bias {a:.6}");
    }
    for w in &res.warnings {
        let _ = write!(s, "\nwarning: {w}");
    }
    Ok(s)
}

/// Bias comparison across the configured estimators and seeds.
pub fn cmd_benchmark(cfg: &RunConfig) -> CliResult<BenchmarkReport> {
    let kinds = cfg.kinds()?;
    if kinds.is_empty() {
        return Err(CliError::Config("`estimators` is empty".into()));
    }
    let seeds = cfg.seeds();
    if seeds.len() < 2 {
        return Err(CliError::Config("at least two seeds are needed for a standard deviation".into()));
    }
    let report = benchmark(&kinds, &cfg.settings(), &cfg.data()?, &seeds, execution(cfg))?;
    write_report(cfg, &report)?;
    Ok(report)
}

pub fn cmd_sweep(cfg: &RunConfig, kind: SweepKind) -> CliResult<BenchmarkReport> {
    let seeds = cfg.seeds();
    if seeds.len() < 2 {
        return Err(CliError::Config("at least two seeds are needed for a standard deviation".into()));
    }
    let data = cfg.data()?;
    let settings = cfg.settings();
    let exec = execution(cfg);
    let report = match kind {
        SweepKind::LambdaA => {
            let grid = cfg
                .sweep
                .lambda_a
                .as_ref()
                .ok_or_else(|| CliError::Config("missing sweep.lambda_a grid".into()))?;
            lambda_sweep(&data, grid, &settings, &seeds, exec)?
        }
        SweepKind::Confounder => {
            let grid = cfg
                .sweep
                .confounder
                .as_ref()
                .ok_or_else(|| CliError::Config("missing sweep.confounder grid".into()))?;
            let kinds = cfg.kinds()?;
            if kinds.is_empty() {
                return Err(CliError::Config("`estimators` is empty".into()));
            }
            confounder_sweep(&data, grid, &kinds, &settings, &seeds, exec)?
        }
    };
    write_report(cfg, &report)?;
    Ok(report)
}

fn write_report(cfg: &RunConfig, report: &BenchmarkReport) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    std::fs::create_dir_all(&dir).map_err(Error::from)?;
    write_atomic(&dir.join(AGGREGATE_FILE), report.aggregate_csv().as_bytes())?;
    write_atomic(&dir.join(RUNS_FILE), report.runs_csv().as_bytes())?;
    write_atomic(&dir.join(LONG_FILE), report.long_csv().as_bytes())?;
    write_atomic(&dir.join(TABLE_FILE), report.text_table().as_bytes())?;
    echo_config(cfg, &dir)
}
