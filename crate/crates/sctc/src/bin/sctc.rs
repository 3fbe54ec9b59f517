use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match sctc::cli::run(sctc::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
