//! Command line front end: runs experiment configs, generates the synthetic
//! datasets as CSV, scores saved checkpoints, and exposes the numerical
//! self-check suites.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bali_core::checks::{gradient_suite, kron_suite, posterior_suite, recursion_suite, CheckReport};
use bali_core::harness::{
    evaluate_checkpoint, expected_targets, gen_sinc, gen_sines_trend, gen_two_moons, load_csv,
    run_experiment, write_dataset_csv, Checkpoint, Dataset, ExperimentConfig,
};
use bali_core::streams;
use bali_core::tensor::RngStream;

#[derive(Parser)]
#[command(name = "bali", version, about = "Train Bayesian neural networks by backpropagated layerwise conjugate inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, split) cell of an experiment config and write
    /// metrics.csv, timing.csv, and any configured grid or checkpoint files.
    Run(RunArgs),
    /// Write one of the built-in synthetic datasets as a CSV file.
    GenData(GenDataArgs),
    /// Score a saved checkpoint on a CSV dataset.
    Eval(EvalArgs),
    /// Run the numerical self-check suites and print one line per check.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's run.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Which generator to draw from.
    #[arg(long, value_enum)]
    name: DatasetName,
    /// Number of points (two-moons needs an even count).
    #[arg(long)]
    n: usize,
    /// Noise standard deviation; each generator has its reference default.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetName {
    Sinc,
    SinesTrend,
    TwoMoons,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint JSON written by a run with save_checkpoint = true.
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV file carrying the feature columns and the target columns the
    /// checkpoint's config names.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated metric names; defaults to the task's standard set.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Posterior draws per prediction.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value_t = SuiteName::All)]
    suite: SuiteName,
    /// Random instances per check (steps for the recursion suite).
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteName {
    Kron,
    Posterior,
    Gradient,
    Recursion,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run(args) => run(args),
        Command::GenData(args) => gen_data(args),
        Command::Eval(args) => eval(args),
        Command::Check(args) => check(args),
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    let report = run_experiment(&config, args.out.as_deref(), args.seed)?;
    println!("recorded {} metric rows", report.records.len());
    // Timing rows are cumulative within a seed, so the last one is the total.
    let mut totals: Vec<(u64, f64)> = Vec::new();
    for t in &report.timings {
        match totals.last_mut() {
            Some((seed, total)) if *seed == t.seed => *total = t.value,
            _ => totals.push((t.seed, t.value)),
        }
    }
    for (seed, total) in &totals {
        println!("seed {seed} trained in {total:.2}s");
    }
    if !report.errors.is_empty() {
        for e in &report.errors {
            eprintln!("cell failed: {e}");
        }
        bail!("{} of {} cells failed", report.errors.len(), totals.len() + report.errors.len());
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut rng = RngStream::new(args.seed, streams::DATA_GEN);
    let data = match args.name {
        DatasetName::Sinc => gen_sinc(args.n, args.noise.unwrap_or(0.1), &mut rng)?,
        DatasetName::SinesTrend => gen_sines_trend(args.n, args.noise.unwrap_or(0.02), &mut rng)?,
        DatasetName::TwoMoons => gen_two_moons(args.n, args.noise.unwrap_or(0.2), &mut rng)?,
    };
    write_dataset_csv(&data, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} rows to {}", data.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let table = load_csv(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let targets = expected_targets(&checkpoint.config);
    let task = checkpoint.config.dataset.task();
    let data = Dataset::from_table(&table, &targets, task)?;
    let metrics = evaluate_checkpoint(&checkpoint, &data, &args.metrics, args.samples.max(1))?;
    for (name, value) in metrics {
        println!("{name} {value}");
    }
    Ok(())
}

fn check(args: CheckArgs) -> anyhow::Result<()> {
    let instances = args.instances.max(1);
    let mut reports: Vec<CheckReport> = Vec::new();
    let run_suite = |suite: SuiteName, reports: &mut Vec<CheckReport>| -> anyhow::Result<()> {
        match suite {
            SuiteName::Kron => reports.extend(kron_suite(instances, args.seed)?),
            SuiteName::Posterior => reports.extend(posterior_suite(instances, args.seed)?),
            SuiteName::Gradient => reports.extend(gradient_suite(instances, args.seed)?),
            SuiteName::Recursion => reports.extend(recursion_suite(instances as u64, args.seed)?),
            SuiteName::All => unreachable!("expanded by the caller"),
        }
        Ok(())
    };
    match args.suite {
        SuiteName::All => {
            for s in [SuiteName::Kron, SuiteName::Posterior, SuiteName::Gradient, SuiteName::Recursion] {
                run_suite(s, &mut reports)?;
            }
        }
        s => run_suite(s, &mut reports)?,
    }
    let mut failed = 0;
    for r in &reports {
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", reports.len());
    }
    Ok(())
}
