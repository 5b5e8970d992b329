mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use log::{error, info};

use args::Cli;

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let mut argv: Vec<OsString> = std::env::args_os().collect();
    if let Some(path) = config::find_config(&argv) {
        argv = match config::merge(argv, &path) {
            Ok(merged) => merged,
            Err(e) => {
                error!("{e:#}");
                return ExitCode::from(commands::exit_code(&e) as u8);
            }
        };
    }
    let cli = match parse(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };

    match serde_json::to_string(&cli) {
        Ok(json) => info!("resolved configuration: {json}"),
        Err(e) => error!("cannot serialize configuration: {e}"),
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
