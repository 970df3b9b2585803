//! Command-line experiment runner for the `sdg` library.
//!
//! ```text
//! sdg train   --config configs/sdg_coral.toml --out runs/sdg
//! sdg prop1   --config configs/prop1.toml --out runs/prop1
//! sdg rdcurve --config configs/rdcurve_demo.toml --out runs/rd
//! sdg sweep   --config configs/sweep.toml --out runs/sweep --seed 3
//! ```
//!
//! Exit codes: 0 success, 2 config error, 3 numeric error, 4 output
//! collision, 1 for I/O failures.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::RunOptions;
use error::{CliError, EXIT_CONFIG, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "sdg", version, about = "Satisficing domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write per-step and per-epoch metrics.
    Train(Common),
    /// Check the biased-SGD convergence bound on a registered objective.
    Prop1(Common),
    /// Trace the penalty-distortion curve of a discrete instance.
    Rdcurve(Common),
    /// Train once per initial distortion weight and report final metrics.
    Sweep(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config (JSON when the file ends in `.json`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout on success and stderr on error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, common, command): (&str, &Common, fn(&RunOptions) -> Result<(), CliError>) = match &cli.command {
        Command::Train(c) => ("train", c, commands::cmd_train),
        Command::Prop1(c) => ("prop1", c, commands::cmd_prop1),
        Command::Rdcurve(c) => ("rdcurve", c, commands::cmd_rdcurve),
        Command::Sweep(c) => ("sweep", c, commands::cmd_sweep),
    };
    let opts = RunOptions {
        config: &common.config,
        out: &common.out,
        seed: common.seed,
        overwrite: common.overwrite,
    };
    match command(&opts) {
        Ok(()) => {
            println!("{name}: wrote {}", common.out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
