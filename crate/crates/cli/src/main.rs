use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dpboost::bench::{
    default_curves, emit_report, fit_one, read_results_jsonl, run_experiment, write_curves,
    Aggregation, ExperimentConfig, RunKey, RunOptions, CURVES_CSV,
};
use dpboost::theory::{run_theory_suite, SuiteOptions};

#[derive(Parser)]
#[command(
    name = "dpboost",
    version,
    about = "Private linear regression with boosted AdaSSP"
)]
struct Cli {
    /// Override the seed list (bench, fit) or the Monte-Carlo seed (theory).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for grid runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and print its coefficients.
    Fit(FitArgs),
    /// Run an experiment grid and write a report.
    Bench(BenchArgs),
    /// Check the mean-boosting bounds numerically.
    Theory(TheoryArgs),
    /// Rebuild ratio curves from stored results.
    Report(ReportArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Experiment config; the first entry of each grid is used unless overridden.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_parser = ["adassp", "boosted_adassp"])]
    algorithm: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stop at the first failed run.
    #[arg(long)]
    fail_fast: bool,
    /// Pick the best (tau, rounds) per dataset and epsilon before comparing.
    #[arg(long)]
    best_of_grid: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// Write the checks as JSON lines to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte-Carlo trials for the finite-sample comparison; 0 skips it.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// A results.jsonl written by `bench`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    best_of_grid: bool,
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, serde_json::Value)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    let echo = serde_json::to_value(&config)?;
    Ok((config, echo))
}

fn resolve(mut config: ExperimentConfig, path: &Path) -> ExperimentConfig {
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    config
}

fn aggregation(best_of_grid: bool) -> Aggregation {
    if best_of_grid {
        Aggregation::BestOfGrid
    } else {
        Aggregation::PerConfiguration
    }
}

fn fit(cli: &Cli, args: &FitArgs) -> Result<()> {
    let (config, _) = load_config(&args.config)?;
    let config = resolve(config, &args.config);
    let algorithm = match args.algorithm.as_deref() {
        Some(a) => serde_json::from_value(serde_json::Value::String(a.into()))?,
        None => config.algorithms[0],
    };
    let key = RunKey {
        dataset: args
            .dataset
            .clone()
            .unwrap_or_else(|| config.datasets[0].name.clone()),
        algorithm,
        epsilon: args.epsilon.unwrap_or(config.epsilons[0]),
        tau: args.tau.unwrap_or(config.taus[0]),
        rounds: args.rounds.unwrap_or(config.rounds_grid[0]),
        seed: cli.seed.unwrap_or(config.seeds[0]),
    };
    let summary = fit_one(&config, &key)?;
    for (name, value) in summary.feature_names.iter().zip(&summary.theta) {
        println!("{name}\t{value}");
    }
    for (name, value) in &summary.metrics {
        println!("# test {name}\t{value}");
    }
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let (mut config, _) = load_config(&args.config)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    let echo = serde_json::to_value(&config)?;
    let config = resolve(config, &args.config);
    let options = RunOptions {
        fail_fast: args.fail_fast,
        threads: cli.threads,
    };
    let results = run_experiment(&config, options)?;
    let curves = default_curves(&results, aggregation(args.best_of_grid))?;
    emit_report(&results, &curves, &echo, &args.out)?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    eprintln!(
        "{} runs ({failed} failed) written to {}",
        results.len(),
        args.out.display()
    );
    Ok(())
}

fn theory(cli: &Cli, args: &TheoryArgs) -> Result<bool> {
    let options = SuiteOptions {
        finite_sample_trials: args.trials,
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    let checks = run_theory_suite(&options)?;
    for c in &checks {
        println!(
            "{}\t{}\t{}\tbound={}\tobserved={}",
            if c.pass { "PASS" } else { "FAIL" },
            c.claim,
            c.grid_point,
            c.bound,
            c.observed
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    eprintln!("{} checks, {failed} failed", checks.len());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let mut body = String::new();
        for c in &checks {
            body.push_str(&serde_json::to_string(c)?);
            body.push('\n');
        }
        std::fs::write(dir.join("theory.jsonl"), body)?;
    }
    Ok(failed == 0)
}

fn report(args: &ReportArgs) -> Result<()> {
    let results = read_results_jsonl(&args.results)?;
    if results.is_empty() {
        bail!("{} holds no results", args.results.display());
    }
    let curves = default_curves(&results, aggregation(args.best_of_grid))?;
    std::fs::create_dir_all(&args.out)?;
    write_curves(&curves, &args.out.join(CURVES_CSV))?;
    for c in &curves {
        println!(
            "{} vs {} on {}: {} of {} tasks at ratio <= 1",
            c.candidate,
            c.baseline,
            c.metric,
            c.count_at(1.0),
            c.task_count()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(args) => fit(&cli, args).map(|_| true),
        Command::Bench(args) => bench(&cli, args).map(|_| true),
        Command::Theory(args) => theory(&cli, args),
        Command::Report(args) => report(args).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
