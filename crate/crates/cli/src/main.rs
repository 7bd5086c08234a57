mod args;
mod commands;
mod error;
mod viz;

use std::process::ExitCode;

use clap::Parser;

use args::{load_config, Cli, Command, Merge};
use error::CliError;

fn init_logging(verbose: u8) {
    let mut builder = env_logger::Builder::new();
    builder.filter_level(log::LevelFilter::Warn);
    builder.parse_env(env_logger::Env::new().filter("RCN_LOG"));
    match verbose {
        0 => {}
        1 => {
            builder.filter_level(log::LevelFilter::Info);
        }
        _ => {
            builder.filter_level(log::LevelFilter::Debug);
        }
    }
    builder.init();
}

/// Merges the config file (if any) under the flags given on the command line.
fn with_config<T: Merge + serde::de::DeserializeOwned>(flags: T, config: Option<&std::path::Path>) -> Result<T, CliError> {
    match config {
        Some(path) => Ok(flags.merge(load_config(path)?)),
        None => Ok(flags),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Gen(a) => commands::gen(with_config(a, config)?),
        Command::Calibrate(a) => commands::calibrate_cmd(with_config(a, config)?),
        Command::Eval(a) => commands::eval(with_config(a, config)?),
        Command::Viz(a) => commands::viz_cmd(with_config(a, config)?),
        Command::Warp(a) => commands::warp_cmd(with_config(a, config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Help and version requests exit 0, real parse errors 2.
        Err(e) => e.exit(),
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
