use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perimotion_cli::args::{DeformArgs, EvalArgs, FitArgs, GenArgs};
use perimotion_cli::commands;
use perimotion_cli::error::CliError;

#[derive(Parser)]
#[command(name = "perimotion", version, about = "Periodic motion fields from 4D image sequences")]
struct Cli {
    /// Directory for every file the command writes.
    #[arg(long, global = true, env = "PERIMOTION_OUT_DIR", default_value = "perimotion-out")]
    out_dir: PathBuf,
    /// Threads for batch evaluation; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sphere sequence with ground-truth meshes.
    Gen(GenArgs),
    /// Fit a velocity field to a volume sequence.
    Fit(FitArgs),
    /// Deform a mesh with a fitted field.
    Deform(DeformArgs),
    /// Score a fitted field against ground-truth meshes and images.
    Eval(EvalArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::file(&cli.out_dir, e))?;
    if cli.workers == Some(0) {
        return Err(CliError::usage("--workers must be at least 1"));
    }
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Gen(a) => commands::gen(a, out),
        Command::Fit(a) => commands::fit(a, cli.workers, out),
        Command::Deform(a) => commands::deform(a, out),
        Command::Eval(a) => commands::eval(a, cli.workers.unwrap_or(1), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
