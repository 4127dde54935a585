//! `mfgcn`: run mean field game experiments from a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfg_core::config::load_config;
use mfg_core::runner::{run, RunOptions, RunStatus, Verb};
use mfg_core::MfgError;

#[derive(Parser)]
#[command(
    name = "mfgcn",
    version,
    about = "Particle solver for 1-D mean field games with common noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the structural assumptions of the configured cost only.
    Check(Common),
    /// Solve the equilibrium and run the configured diagnostics.
    Solve(Common),
    /// Solve and compare against the closed-form oracle.
    Bench(Common),
    /// Solve from several initial guesses and compare the equilibria.
    ProbeUniqueness(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Solve even when an assumption probe fails.
    #[arg(long)]
    override_assumptions: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, args) = match cli.command {
        Command::Check(a) => (Verb::Check, a),
        Command::Solve(a) => (Verb::Solve, a),
        Command::Bench(a) => (Verb::Bench, a),
        Command::ProbeUniqueness(a) => (Verb::ProbeUniqueness, a),
    };
    match execute(verb, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MfgError::AssumptionGate(_) => ExitCode::from(2),
                MfgError::Config(_) | MfgError::InvalidParameter { .. } => ExitCode::from(64),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn execute(verb: Verb, args: Common) -> mfg_core::Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let options = RunOptions {
        out: args.out,
        override_assumptions: args.override_assumptions,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(MfgError::Config("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| MfgError::Config(format!("cannot start worker pool: {e}")))?;
    let summary = pool.install(|| run(&config, verb, &options))?;
    debug_assert_eq!(summary.status, RunStatus::Complete);
    println!("{} complete: {}", verb.name(), summary.out_dir.display());
    print_highlights(&summary.reports);
    Ok(())
}

fn print_highlights(reports: &serde_json::Value) {
    if let Some(list) = reports["assumptions"].as_array() {
        for r in list {
            let v = r["worst_violation"].as_f64().unwrap_or(f64::NAN);
            let verdict = if v == 0.0 { "pass" } else { "FLAGGED" };
            println!(
                "  {:<11} {verdict} (worst violation {v:e})",
                r["assumption"].as_str().unwrap_or("?")
            );
        }
    }
    let o = &reports["oracle"];
    if o["a0_rel"].is_number() {
        println!(
            "  oracle: a0 {:.6} vs {:.6}, b0 {:.6} vs {:.6}, H2 rel {:.3e}",
            o["a0_fitted"].as_f64().unwrap_or(f64::NAN),
            o["a0_oracle"].as_f64().unwrap_or(f64::NAN),
            o["b0_fitted"].as_f64().unwrap_or(f64::NAN),
            o["b0_oracle"].as_f64().unwrap_or(f64::NAN),
            o["h2_rel"].as_f64().unwrap_or(f64::NAN),
        );
    }
    let e = &reports["exploitability"];
    if e["value"].is_number() {
        println!(
            "  exploitability: {:.3e} ± {:.3e}",
            e["value"].as_f64().unwrap_or(f64::NAN),
            e["stderr"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let u = &reports["uniqueness"];
    if u["max_relative"].is_number() {
        println!(
            "  uniqueness: max relative H2 distance {:.3e}",
            u["max_relative"].as_f64().unwrap_or(f64::NAN)
        );
    }
    let s = &reports["smp"];
    if s["worst_gap_in_stderr"].is_number() {
        println!(
            "  smp: worst gap {:.2} stderr",
            s["worst_gap_in_stderr"].as_f64().unwrap_or(f64::NAN)
        );
    }
}
