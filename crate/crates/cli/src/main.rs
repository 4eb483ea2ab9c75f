mod commands;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Polar-voxel semantic occupancy toolkit.
#[derive(Debug, Parser)]
#[command(name = "pvo", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Global {
    /// Model configuration JSON (default: the desk preset, tiny for gradcheck).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file, or directory for `synth`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration override, e.g. `--set grp.enable=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes with clouds, truth grids and camera volumes.
    Synth {
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Predict every scene of a data directory and write a metrics report.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Parameters to load; fresh seeded parameters otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        bands: usize,
        /// Also write the confusion table as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
        /// Replace the logits with the one-hot truth (metric pipeline check).
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
    },
    /// Train on a data directory (or generated scenes) and save a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training log path (default `<out>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
    },
    /// Train and score the five component rows; writes a Markdown table.
    Ablate {
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Finite-difference check of every backward pass; exit 0 iff all pass.
    Gradcheck {
        /// Negate the analytic gradient of this entry (fault injection).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Point density per range band on both grids and range-banded mIoU.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        bands: usize,
    },
    /// Resample a polar feature volume onto the Cartesian output grid.
    Resample {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Invalid arguments, configuration or data; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code of a failed command: 2 for usage, validation and missing
/// inputs, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<pvo::Error>() {
            return match e {
                pvo::Error::Numeric(_) => 1,
                pvo::Error::Io(io) => io_code(io),
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_code(io);
        }
    }
    1
}

fn io_code(e: &std::io::Error) -> u8 {
    if e.kind() == std::io::ErrorKind::NotFound {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth { scenes } => commands::synth(g, scenes),
        Command::Run { data, checkpoint, bands, confusion, oracle, precision } => {
            commands::run(g, &data, checkpoint.as_deref(), bands, confusion.as_deref(), oracle, precision)
        }
        Command::Train { data, log, precision } => commands::train(g, data.as_deref(), log.as_deref(), precision),
        Command::Ablate { csv, precision } => commands::ablate(g, csv.as_deref(), precision),
        Command::Gradcheck { corrupt } => commands::gradcheck(g, corrupt),
        Command::Stats { data, checkpoint, bands } => commands::stats(g, data.as_deref(), checkpoint.as_deref(), bands),
        Command::Resample { input } => commands::resample(g, &input),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
