//! `zapstop`: train, evaluate and analyze matrix-gain Q-learning runs from a
//! TOML experiment file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;

use commands::Outcome;

#[derive(Debug, Parser)]
#[command(name = "zapstop", version, about = "Matrix-gain Q-learning for optimal stopping")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured learner for every replica and write run records.
    Train(TrainArgs),
    /// Estimate the policy value of each record's final parameter.
    Evaluate(ReadArgs),
    /// Compare the replica spread with the predicted asymptotic covariance.
    Analyze(AnalyzeArgs),
    /// Run the exact-oracle property checks on a finite chain.
    OracleCheck(OracleArgs),
    /// Compare a run with the solutions of its mean ODE.
    OdeCheck(OdeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output.dir`, then `$ZAPSTOP_OUT/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run.replicas`.
    #[arg(long)]
    pub replicas: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReadArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory holding the run records; defaults to the output directory.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub read: ReadArgs,
    /// Run record whose final parameter replaces `theta*`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Random draws per property.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct OdeArgs {
    #[command(flatten)]
    pub read: ReadArgs,
    /// Record to check.
    #[arg(long, default_value_t = 0)]
    pub replica: usize,
    /// Horizon of the ODE solved from `theta_0` for the `b` decay fit.
    #[arg(long, default_value_t = 5.0)]
    pub b_horizon: f64,
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
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::OracleCheck(a) => commands::oracle_check(a),
        Command::OdeCheck(a) => commands::ode_check(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
