mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Exit codes shared by every command.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
}

/// Maps a library error to the exit-code taxonomy.
fn exit_code(e: &dtreg::Error) -> u8 {
    use dtreg::Error::*;
    match e {
        _ if e.is_numerical() => exit::NUMERICAL,
        InvalidParameter(_) => exit::USAGE,
        _ => exit::DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(exit::USAGE);
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    match commands::run(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
