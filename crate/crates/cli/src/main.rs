mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;
use dynorank::Error;

use crate::args::{Cli, Command};

/// Failure classes with a fixed exit status.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NoConvergence { .. } | Error::Diverged { .. } | Error::Undefined(_) => {
                Failure::Numerical(e.to_string())
            }
            other => Failure::Input(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Input(format!("json error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Rank(a) => commands::rank(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Metrics(m) => commands::metrics(&m),
        Command::Correlate(a) => commands::correlate(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::DspritesInspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
