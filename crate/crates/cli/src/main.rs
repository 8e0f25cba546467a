mod commands;
mod error;
mod io;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{audit, classify, evaluate, fit, report, synth};

/// Fit, evaluate and audit normative models of tabular biological features.
#[derive(Debug, Parser)]
#[command(name = "normgauge", version)]
struct Cli {
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known group effects.
    Synth(synth::SynthArgs),
    /// Fit one normative model per region on the training split.
    Fit(fit::FitArgs),
    /// Compute deviation scores, residual errors and fit metrics with a saved model.
    Evaluate(evaluate::EvaluateArgs),
    /// Group summaries, group-difference tests and parity gaps.
    Audit(audit::AuditArgs),
    /// Predict group membership from deviation scores.
    Classify(classify::ClassifyArgs),
    /// Summarize a run directory as markdown.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Fit(a) => fit::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Audit(a) => audit::run(a),
        Command::Classify(a) => classify::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
