//! `styleforge` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, DEVICE_ENV};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let resolved = match config::resolve(&cli, std::env::var(DEVICE_ENV).ok()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&resolved.to_json()).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    match commands::run(&resolved) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
