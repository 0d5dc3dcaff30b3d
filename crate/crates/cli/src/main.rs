use std::process::ExitCode;

use clap::Parser;
use gnv_cli::{progress::Progress, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            Progress::new(cli.json).error(&e.to_string(), e.exit_code());
            ExitCode::from(e.exit_code())
        }
    }
}
