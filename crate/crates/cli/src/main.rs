use std::process::ExitCode;

use clap::Parser;
use xct_cli::Cli;

fn main() -> ExitCode {
    match xct_cli::run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
