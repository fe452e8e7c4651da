//! Experiment runner for `spdelab`: TOML configs, the named pipelines behind
//! each subcommand, CSV emission and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod output;
pub mod runner;

use std::path::Path;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use runner::Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Certify,
    Laplace,
    Sweep,
    Audit,
    Accept,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Certify => "certify",
            Self::Laplace => "laplace",
            Self::Sweep => "sweep",
            Self::Audit => "audit",
            Self::Accept => "accept",
        }
    }
}

/// Runs one pipeline on an in-memory config.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Report, CliError> {
    match command {
        Command::Simulate => runner::simulate(cfg),
        Command::Certify => runner::certify(cfg),
        Command::Laplace => runner::laplace(cfg),
        Command::Sweep => runner::sweep(cfg),
        Command::Audit => runner::audit(cfg),
        Command::Accept => acceptance::run_report(),
    }
}

/// Runs `command` on `threads` workers (or the default pool) and writes its
/// outputs and the manifest to `out`. Returns the summary lines and, when
/// the run finished but must still exit nonzero, the blocking failure.
pub fn execute(
    command: Command,
    cfg: &ExperimentConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<(Vec<String>, Option<CliError>), CliError> {
    let report = match threads {
        Some(k) => spdelab::with_threads(k, || run(command, cfg))??,
        None => run(command, cfg)?,
    };
    report.output.write(out, command.name(), &cfg.digest(), cfg.seed)?;
    Ok((report.summary, report.failure))
}
