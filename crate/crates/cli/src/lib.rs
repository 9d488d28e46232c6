//! Command-line front end for the noisy-lstm library.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod sweep;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, ReplayArgs};
use error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};
use manifest::RunManifest;

/// Size of the worker pool used for data generation and batched kernels.
pub const THREADS_ENV: &str = "NOISY_LSTM_THREADS";

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool may already exist when `run` is called more than once in a process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train_cmd(&a),
        Command::Eval(a) => commands::eval_cmd(&a),
        Command::Sweep(a) => sweep::sweep_cmd(&a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(&a),
        Command::Replay(a) => replay(&a),
    }
}

fn replay(args: &ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    let mut command = manifest.command;
    if matches!(command, Command::Replay(_)) {
        return Err(CliError::Usage("a replay manifest cannot replay another replay".into()));
    }
    if let Some(out) = &args.out {
        match &mut command {
            Command::GenData(a) => a.out = out.clone(),
            Command::Train(a) => a.out = out.clone(),
            Command::Eval(a) => a.out = Some(out.clone()),
            Command::Sweep(a) => a.out = out.clone(),
            Command::Gradcheck(_) | Command::Replay(_) => {}
        }
    }
    dispatch(command)
}
