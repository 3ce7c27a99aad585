//! `colorize`: dataset preparation, training, sampling, evaluation, sweeps
//! and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod args;
mod commands;
mod run_manifest;

use std::process::ExitCode;

use clap::Parser;

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<commands::UsageError>()
            || matches!(
                c.downcast_ref::<colorize_core::Error>(),
                Some(colorize_core::Error::InvalidArgument(_) | colorize_core::Error::OutOfRange { .. })
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match args::Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version are not errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
