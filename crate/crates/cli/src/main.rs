//! `t5lab`: one binary, one subcommand per job. Every run writes a
//! `manifest.json` beside its outputs; `t5lab rerun` replays one.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for everything else.

mod args;
mod commands;
mod error;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
