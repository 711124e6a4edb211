use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use cliffordnet::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let status = run(&cli, &mut stdout);
    let _ = stdout.flush();
    match status {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
