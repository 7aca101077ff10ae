//! `biaslens` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.

mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};
use commands::{CmdResult, Ctx, Failure};
use config::{resolve_seed, RunConfig};

fn run(cli: Cli) -> CmdResult {
    let file = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: resolve_seed(cli.seed, &file),
        out: cli.out,
        jobs: cli.jobs,
        file,
    };
    match &cli.command {
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::Resample(a) => commands::resample(&ctx, a),
        Command::Augment(a) => commands::augment(&ctx, a),
        Command::Train(a) => commands::train_cmd(&ctx, a),
        Command::Audit(a) => commands::audit(&ctx, a),
        Command::Mitigate(a) => commands::mitigate(&ctx, a),
        Command::Recalibrate(a) => commands::recalibrate(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
        Command::Heatmap(a) => commands::heatmap(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Failure::exit_code(&e))
        }
    }
}
