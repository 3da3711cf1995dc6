use std::process::ExitCode;

use clap::Parser;
use collapse_cli::commands::{classify, execute};
use collapse_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e) as u8)
        }
    }
}
