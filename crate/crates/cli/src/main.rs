//! `specinv`: invert, train, bench, metrics and roundtrip.
//!
//! JSON results go to stdout (one object per line), logs to stderr. Exit
//! codes: 0 success, 2 I/O, 3 configuration, 4 solver failure.

mod args;
mod commands;
mod failure;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use failure::{Failure, EXIT_CONFIG};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    let result: Result<Vec<serde_json::Value>, Failure> = match cli.command {
        Command::Invert(a) => commands::invert_cmd(a, sub),
        Command::Train(a) => commands::train_cmd(a, sub),
        Command::Bench(a) => commands::bench_cmd(a, sub),
        Command::Metrics(a) => commands::metrics_cmd(a, sub),
        Command::Roundtrip(a) => commands::roundtrip_cmd(a, sub),
    };
    match result {
        Ok(values) => {
            for v in values {
                println!("{v}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
