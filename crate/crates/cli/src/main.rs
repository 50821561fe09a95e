use std::process::ExitCode;

use adscale_cli::commands::default_log_level;
use adscale_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = cli
        .global
        .log_level
        .clone()
        .unwrap_or_else(|| default_log_level(&cli));
    env_logger::Builder::new()
        .parse_filters(&level)
        .parse_default_env()
        .init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(5);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
