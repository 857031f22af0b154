//! Command-line runner: single experiments, the parameter grid and chain
//! verification.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use spdl_core::experiment::{default_grid, run, run_grid, ExperimentConfig};
use spdl_core::ledger::import_chain;
use spdl_core::par::Exec;

#[derive(Debug, Parser)]
#[command(name = "spdl", version, about = "Decentralized learning simulator with DP, Krum and block consensus")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment (the default when no subcommand is given).
    Run(RunArgs),
    /// Run every cell of the default parameter grid.
    Grid(GridArgs),
    /// Check the integrity of an exported chain.
    VerifyChain { path: PathBuf },
}

#[derive(Debug, Clone, Args, Default)]
struct Overrides {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    byz_ratio: Option<f64>,
    /// honest, silent, random-gaussian[:s], sign-flip[:s], constant:v[,..],
    /// equivocate, delta-substitution
    #[arg(long)]
    byz_strategy: Option<String>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = ["krum", "median", "average"])]
    gar: Option<String>,
    #[arg(long, value_parser = ["pure", "dp", "spdl"])]
    scheme: Option<String>,
    #[arg(long, value_parser = ["synthetic", "idx"])]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    idx_train_images: Option<PathBuf>,
    #[arg(long)]
    idx_train_labels: Option<PathBuf>,
    #[arg(long)]
    idx_test_images: Option<PathBuf>,
    #[arg(long)]
    idx_test_labels: Option<PathBuf>,
    /// Extra `key=value` settings, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Args, Default)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Export the final chain of the first honest node here.
    #[arg(long)]
    chain_out: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<u32>,
    /// Write the consensus trace here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Clone, Args)]
struct GridArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Directory receiving one CSV per cell.
    #[arg(long, default_value = "grid")]
    out_dir: PathBuf,
    /// Run cells one after another.
    #[arg(long)]
    sequential: bool,
}

fn build_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let path_str = |p: &PathBuf| p.display().to_string();
    let pairs: Vec<(&str, Option<String>)> = vec![
        ("nodes", o.nodes.map(|v| v.to_string())),
        ("byz_ratio", o.byz_ratio.map(|v| v.to_string())),
        ("byz_strategy", o.byz_strategy.clone()),
        ("rounds", o.rounds.map(|v| v.to_string())),
        ("gamma", o.gamma.map(|v| v.to_string())),
        ("epsilon", o.epsilon.map(|v| v.to_string())),
        ("delta", o.delta.map(|v| v.to_string())),
        ("clip", o.clip.map(|v| v.to_string())),
        ("batch_size", o.batch_size.map(|v| v.to_string())),
        ("gar", o.gar.clone()),
        ("scheme", o.scheme.clone()),
        ("dataset", o.dataset.clone()),
        ("seed", o.seed.map(|v| v.to_string())),
        ("idx_train_images", o.idx_train_images.as_ref().map(path_str)),
        ("idx_train_labels", o.idx_train_labels.as_ref().map(path_str)),
        ("idx_test_images", o.idx_test_images.as_ref().map(path_str)),
        ("idx_test_labels", o.idx_test_labels.as_ref().map(path_str)),
    ];
    for (key, value) in pairs {
        if let Some(v) = value {
            cfg.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v).with_context(|| format!("--set {kv}"))?;
    }
    Ok(cfg)
}

fn run_once(args: &RunArgs) -> Result<()> {
    let mut cfg = build_config(&args.overrides)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(path) = &args.chain_out {
        cfg.chain_out = Some(path.clone());
    }
    if let Some(r) = args.repetitions {
        cfg.repetitions = r;
    }
    if args.trace_out.is_some() {
        cfg.trace = true;
    }
    if args.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let runs = run(&cfg)?;
    let mut trace_file = match &args.trace_out {
        Some(path) => Some(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => None,
    };
    for (path, report) in &runs {
        let committed = report.metrics.iter().filter(|m| m.committed).count();
        let final_error = report
            .metrics
            .last()
            .and_then(|m| m.test_error)
            .map_or_else(|| "-".to_string(), |e| format!("{e:.4}"));
        println!(
            "{}: {} rounds, {} committed, final test error {}",
            path.display(),
            report.metrics.len(),
            committed,
            final_error
        );
        if let Some(f) = trace_file.as_mut() {
            for line in &report.trace {
                writeln!(f, "{line}")?;
            }
        }
    }
    Ok(())
}

fn grid(args: &GridArgs) -> Result<()> {
    let base = build_config(&args.overrides)?;
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    let results = run_grid(&base, &default_grid(), &args.out_dir, exec)?;
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(err) => println!(
                "{}: final test error {}",
                r.path.display(),
                err.map_or_else(|| "-".to_string(), |e| format!("{e:.4}"))
            ),
            Err(e) => {
                failed += 1;
                println!("{}: failed: {e}", r.path.display());
            }
        }
    }
    println!("{} cells, {failed} failed", results.len());
    Ok(())
}

fn verify_chain(path: &Path) -> Result<()> {
    let chain = import_chain(path)?;
    let tip = chain.tip();
    println!("ok: {} blocks, tip height {} hash {}", chain.len(), tip.height, tip.hash);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        None => run_once(&cli.run),
        Some(Command::Run(args)) => run_once(args),
        Some(Command::Grid(args)) => grid(args),
        Some(Command::VerifyChain { path }) => verify_chain(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
