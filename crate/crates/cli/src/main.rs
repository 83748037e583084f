mod args;
mod commands;
mod config;
mod settings;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::ConfigError;
use settings::Global;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values; exit code 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse();
    let result = Global::new(cli.config.as_deref(), cli.out_dir, cli.rng_seed, cli.verbose).and_then(|g| {
        match &cli.command {
            Command::Generate(a) => commands::generate(&g, a),
            Command::Run(a) => commands::run(&g, a),
            Command::Baselines(a) => commands::baselines(&g, a),
            Command::Serve(a) => commands::serve(&g, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
