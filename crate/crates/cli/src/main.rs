mod checkpoint;
mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swarmseg::model::Method;

/// Swarm-learning segmentation simulator.
#[derive(Debug, Parser)]
#[command(name = "swarmseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// ours | swarm_plain | single | fixed_adapt | img_adapt
    #[arg(long, global = true)]
    method: Option<Method>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Worker threads for per-center training. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Write every round message to <out>/messages.
    #[arg(long, global = true)]
    log_messages: bool,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-center dataset into <out>/data.
    GenData,
    /// Train the configured method on <out>/data.
    Train,
    /// Score the checkpoints in <out>/checkpoints.
    Eval {
        /// Also dump image, ground truth and predictions as PGM files.
        #[arg(long)]
        dump_pgm: bool,
    },
    /// Render <out>/report.svg from the training history.
    Report,
    /// Run the gradient, oracle and property checks.
    Selftest {
        /// Random points per gradient check.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Scale applied to the conv2d kernel gradient (fault injection).
        #[arg(long, default_value_t = 1.0, hide = true)]
        conv_grad_scale: f64,
    },
}

/// Failure classes, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    SelftestFailed(usize),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::SelftestFailed(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::SelftestFailed(n) => write!(f, "selftest: {n} check(s) failed"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cli.common),
        Command::Train => commands::train(&cli.common),
        Command::Eval { dump_pgm } => commands::eval(&cli.common, dump_pgm),
        Command::Report => commands::report(&cli.common),
        Command::Selftest { points, conv_grad_scale } => commands::selftest(points, conv_grad_scale),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
