mod args;
mod commands;
mod failure;
mod manifest;
mod threads;

use args::{Cli, Command};
use clap::Parser;
use std::process::ExitCode;

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    threads::configure()?;
    match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Rank(a) => commands::rank(a),
        Command::Run(a) => commands::run(a),
        Command::Agree(a) => commands::agree(a),
        Command::Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure::exit_code(&e) as u8)
        }
    }
}
