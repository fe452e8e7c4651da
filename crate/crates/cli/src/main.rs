use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spdelab_cli::{execute, CliError, Command, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "spdelab", version, about = "Spectral Langevin and posterior contraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML experiment config; optional for `accept`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Affects speed only.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Langevin moment traces and the stationarity report.
    Simulate,
    /// Contraction certificate with empirical validation.
    Certify,
    /// Laplace pair, equivalence report, KL and the H/K bounds.
    Laplace,
    /// Grid over n or delta with log-log slope fits.
    Sweep,
    /// Assumption audits.
    Audit,
    /// Full acceptance suite.
    Accept,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Certify => Command::Certify,
            Cmd::Laplace => Command::Laplace,
            Cmd::Sweep => Command::Sweep,
            Cmd::Audit => Command::Audit,
            Cmd::Accept => Command::Accept,
        }
    }
}

fn main_inner(cli: Cli) -> Result<(Vec<String>, Option<CliError>), CliError> {
    let command = Command::from(cli.command);
    let mut cfg = match (&cli.config, command) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Command::Accept) => ExperimentConfig::parse("")?,
        (None, _) => return Err(CliError::config("--config", "required for this subcommand")),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.threads == Some(0) {
        return Err(CliError::config("--threads", "must be at least 1"));
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    execute(command, &cfg, &out, cli.threads)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let failure = match main_inner(cli) {
        Ok((lines, failure)) => {
            for l in lines {
                println!("{l}");
            }
            failure
        }
        Err(e) => Some(e),
    };
    match failure {
        None => ExitCode::SUCCESS,
        Some(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
