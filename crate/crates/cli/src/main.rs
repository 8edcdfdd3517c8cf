use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peereffect_cli::{
    cmd_benchmark, cmd_estimate, cmd_generate, cmd_sweep, CliError, CliResult, Overrides, RunConfig, SweepKind,
};

#[derive(Parser)]
#[command(name = "peereffect", version, about = "Peer-effect simulation, estimation, and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the configured ones.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset directory.
    Generate(Common),
    /// Fit one estimator on a dataset directory.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (graph.txt, X.csv, Y.csv, optional truth.json).
        #[arg(long)]
        data: PathBuf,
        /// dig2rsi, dl2sls, 2sls, fn-iv, loo or naive.
        #[arg(long)]
        estimator: String,
    },
    /// Compare the configured estimators over the configured seeds.
    Benchmark(Common),
    /// Sweep lambda_a or confounder strength.
    Sweep {
        /// lambda_a or confounder.
        kind: String,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, required: bool) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if required => return Err(CliError::Config("--config is required".into())),
        None => RunConfig::parse("", std::path::Path::new("."))?,
    };
    Overrides {
        out: common.out.clone(),
        seeds: common.seed_override.clone(),
        threads: common.threads,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(common) => {
            println!("{}", cmd_generate(&load(&common, true)?)?);
        }
        Command::Estimate {
            common,
            data,
            estimator,
        } => {
            let cfg = load(&common, false)?;
            println!("{}", cmd_estimate(&cfg, &data, &estimator)?);
        }
        Command::Benchmark(common) => {
            let report = cmd_benchmark(&load(&common, true)?)?;
            print!("{}", report.text_table());
        }
        Command::Sweep { kind, common } => {
            let kind: SweepKind = kind.parse()?;
            let report = cmd_sweep(&load(&common, true)?, kind)?;
            print!("{}", report.text_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
