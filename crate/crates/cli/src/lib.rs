//! Command-line front end: `generate`, `unmix-joint`, `unmix-separate`,
//! `evaluate` and `compare`.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 when a command fails.

mod args;
mod commands;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;

/// Parses `argv` (program name first) and runs the selected subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
