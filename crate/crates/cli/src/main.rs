use std::io::Write;
use std::process::ExitCode;

use bros_cli::cli::{dispatch, Cli};
use clap::Parser;

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bros: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
