mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use pipeline::{Ds, Pipeline};

/// Sanity tests for spurious correlations in volumetric scan classifiers.
///
/// Exit status: 0 when the verdict passes, 2 when a sanity test fails,
/// 1 on any error.
#[derive(Parser)]
#[command(name = "ctsanity", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, env = "CTSANITY_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages even when they are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Restrict data stages to one dataset.
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Dev,
    Gen,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom datasets.
    Synth,
    /// Resample, resize and clip every scan.
    Preprocess,
    /// Build the original, target-only and target-removed formats.
    GenFormats,
    /// Build noise images.
    GenNoise,
    /// Fit one system per training format on the whole development set.
    Train,
    /// Cross-validated evaluation of every training format on every test format.
    EvalMatrix,
    /// Render the report and apply the verdict.
    Report,
    /// Every stage in order.
    Run,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("no configuration given; pass --config or set CTSANITY_CONFIG")?;
    let mut cfg = RunConfig::load(path)?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.resolve_seeds();
    cfg.validate().with_context(|| format!("invalid configuration {}", path.display()))?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("ctsanity-out"));
    let mut p = Pipeline::new(cfg, out, cli.force)?;
    let datasets = match cli.dataset {
        Some(DatasetArg::Dev) => vec![Ds::Dev],
        Some(DatasetArg::Gen) => vec![Ds::Gen],
        None => p.datasets(),
    };
    let verdict_code = |pass: bool| if pass { ExitCode::SUCCESS } else { ExitCode::from(2) };
    match cli.command {
        Command::Synth => datasets.iter().try_for_each(|&d| p.synth(d))?,
        Command::Preprocess => datasets.iter().try_for_each(|&d| p.preprocess(d))?,
        Command::GenFormats => datasets.iter().try_for_each(|&d| p.gen_formats(d))?,
        Command::GenNoise => datasets.iter().try_for_each(|&d| p.gen_noise(d))?,
        Command::Train => p.train()?,
        Command::EvalMatrix => p.eval_matrix()?,
        Command::Report => return Ok(verdict_code(p.report()?.verdict.pass)),
        Command::Run => {
            for d in p.datasets() {
                p.synth(d)?;
                p.preprocess(d)?;
                p.gen_formats(d)?;
                p.gen_noise(d)?;
            }
            p.train()?;
            p.eval_matrix()?;
            let report = p.report()?;
            println!("report: {}", p.out_dir().join("report").display());
            return Ok(verdict_code(report.verdict.pass));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
