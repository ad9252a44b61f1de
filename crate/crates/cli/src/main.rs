use std::process::ExitCode;

use adapttikh_cli::{
    cmd_check_lemma, cmd_delta_study, cmd_rate_study, cmd_solve, resolve_threads, CheckLemmaArgs, CliError, DeltaStudyArgs,
    RateStudyArgs, SolveArgs,
};
use clap::{Parser, Subcommand};

/// Adaptive Tikhonov regularization of the ring-source benchmark with
/// functional error estimators.
#[derive(Debug, Parser)]
#[command(name = "adapttikh", version)]
struct Cli {
    /// Threads for the sparse factorizations (0: one per core). The
    /// ADAPTTIKH_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one Tikhonov problem and report the estimators as JSON.
    Solve(SolveArgs),
    /// Estimator and true error over a refinement sequence, as CSV.
    RateStudy(RateStudyArgs),
    /// Adaptive discrepancy-principle runs over noise levels, as CSV.
    DeltaStudy(DeltaStudyArgs),
    /// Compare the (sigma, gamma) admissibility check with sampling.
    CheckLemma(CheckLemmaArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let env = std::env::var("ADAPTTIKH_THREADS").ok();
    if let Some(threads) = resolve_threads(cli.threads, env.as_deref())? {
        adapttikh::set_threads(threads);
    }
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::RateStudy(a) => cmd_rate_study(a),
        Command::DeltaStudy(a) => cmd_delta_study(a),
        Command::CheckLemma(a) => cmd_check_lemma(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
