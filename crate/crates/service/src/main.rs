use std::process::ExitCode;

use clap::Parser;
use twm_service::cli::{run, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !matches!(cli.command, Command::Serve(_)) {
        twm_service::init_tracing(&std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
