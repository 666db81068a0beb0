//! `rankclip-lab`: generate synthetic paired data, train dual encoders with ranking-consistency
//! losses, evaluate them and run the built-in verification suites.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod verify;

use commands::{CliError, VerifyMode, EXIT_INVALID, EXIT_OK};

#[derive(Debug, Parser)]
#[command(
    name = "rankclip-lab",
    version,
    about = "Ranking-consistent contrastive pretraining lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Gradcheck,
    Oracle,
    Schedule,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoders; writes history, checkpoint and summary into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the top-level `seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the `[eval]` section; defaults are used without it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a verification suite.
    Verify {
        #[arg(long, value_enum)]
        mode: Mode,
        /// For `schedule`, the table covers `train.epochs` epochs (64 without a config).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate every variant for every seed listed in `[compare]`.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Uses this dataset instead of generating one from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Runs a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => commands::train(&config, &data, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
        } => commands::eval(config.as_deref(), &checkpoint, &data, &out),
        Command::Verify { mode, config } => {
            let mode = match mode {
                Mode::Gradcheck => VerifyMode::Gradcheck,
                Mode::Oracle => VerifyMode::Oracle,
                Mode::Schedule => VerifyMode::Schedule,
            };
            commands::verify(mode, config.as_deref())
        }
        Command::Compare {
            config,
            out,
            data,
            seed,
        } => commands::compare(&config, data.as_deref(), &out, seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    }
}
