//! Command-line harness: reproduce the caching experiment, run the
//! capability demos, or audit internal invariants. All logic lives in the
//! library; this file only parses arguments and prints.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lipos::config::SimConfig;
use lipos::sim::{self, CachePolicy};

#[derive(Parser)]
#[command(name = "lipos", version, about = "Deterministic serving-kernel simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep popularity skew, arrival rate, and retention policy over the
    /// document-serving workload; emit one CSV row per cell.
    Run(RunArgs),
    /// Run every capability demo (the same programs as `examples/`) and
    /// report pass/fail.
    Examples,
    /// Audit the implementation against independent oracles: shadow store
    /// equivalence, model oracle, scheduler policies, thread discipline,
    /// and bitwise determinism.
    Check,
}

#[derive(Args)]
struct RunArgs {
    /// Base configuration file (.toml or .json); defaults to the built-in
    /// experiment profile.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Pareto index of document popularity; repeat for a sweep.
    /// [default: 0.2 0.6 1.0 1.4 2.0]
    #[arg(long = "alpha", value_name = "A")]
    alphas: Vec<f64>,

    /// Mean arrivals per virtual second; repeat for a sweep.
    /// [default: 2 20 100]
    #[arg(long = "rate", value_name = "R")]
    rates: Vec<f64>,

    /// Retention policy: `none`, `topk:K`, or `consecutive:N`; repeat for a
    /// sweep. [default: topk:20 none]
    #[arg(long = "policy", value_name = "P")]
    policies: Vec<CachePolicy>,

    /// Override the number of documents in the corpus.
    #[arg(long)]
    docs: Option<u32>,

    /// Override tokens per document.
    #[arg(long)]
    doc_len: Option<u64>,

    /// Override virtual seconds of arrivals per cell.
    #[arg(long)]
    duration: Option<f64>,

    /// Override the workload seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Also write the full event trace (JSON lines) here.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, String> {
    let mut cfg = match &args.config {
        Some(path) => SimConfig::load(path).map_err(|e| e.to_string())?,
        None => SimConfig::experiment_profile(),
    };
    if let Some(docs) = args.docs {
        cfg.workload.num_docs = docs;
    }
    if let Some(doc_len) = args.doc_len {
        cfg.workload.doc_len = doc_len;
    }
    if let Some(duration) = args.duration {
        cfg.workload.duration = duration;
    }
    if let Some(seed) = args.seed {
        cfg.workload.seed = seed;
    }
    cfg.validate().map_err(|e| e.to_string())?;

    let alphas = if args.alphas.is_empty() {
        vec![0.2, 0.6, 1.0, 1.4, 2.0]
    } else {
        args.alphas
    };
    let rates = if args.rates.is_empty() {
        vec![2.0, 20.0, 100.0]
    } else {
        args.rates
    };
    let policies = if args.policies.is_empty() {
        vec![CachePolicy::TopK(20), CachePolicy::None]
    } else {
        args.policies
    };

    let output = sim::run_experiment(&cfg, &alphas, &rates, &policies, args.trace.is_some());

    match &args.out {
        Some(path) => std::fs::write(path, &output.csv)
            .map_err(|e| format!("writing {}: {e}", path.display()))?,
        None => print!("{}", output.csv),
    }
    if let (Some(path), Some(lines)) = (&args.trace, &output.trace_lines) {
        std::fs::write(path, lines).map_err(|e| format!("writing {}: {e}", path.display()))?;
    }
    for err in &output.errors {
        eprintln!("cell failed: {err}");
    }
    Ok(if output.errors.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn print_report(results: Vec<(&'static str, Result<String, String>)>) -> ExitCode {
    let mut failed = 0;
    let total = results.len();
    for (name, result) in results {
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(err) => {
                failed += 1;
                println!("FAIL {name}: {err}");
            }
        }
    }
    println!("{}/{} passed", total - failed, total);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args).unwrap_or_else(|err| {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }),
        Command::Examples => print_report(sim::demos::run_examples()),
        Command::Check => print_report(sim::checks::run_checks()),
    }
}
