//! Command-line front end: training, evaluation, gradient checks and the
//! scaling benchmark.

pub mod args;
pub mod commands;
pub mod dataset;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;
use args::Command;

/// Exit code for errors caused by an incompatible checkpoint.
pub const EXIT_VERSION: i32 = 3;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Gradcheck(a) => commands::gradcheck::run(a),
        Command::Bench(a) => commands::bench::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<slstm_core::Error>() {
                Some(slstm_core::Error::Version(_)) => EXIT_VERSION,
                _ => 1,
            }
        }
    }
}
