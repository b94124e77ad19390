//! `tagunet` command-line entry point.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Bad flags or configuration; reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn run(cli: &Cli) -> anyhow::Result<()> {
    let jobs = cli.jobs.max(1);
    match &cli.command {
        Command::Synth(a) => commands::synth(a, jobs),
        Command::Hierarchy(a) => commands::hierarchy(a, jobs),
        Command::Train(a) => commands::train_cmd(a, jobs),
        Command::Predict(a) => commands::predict(a, jobs),
        Command::Evaluate(a) => commands::evaluate(a, jobs),
        Command::Compare(a) => commands::compare(a, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
