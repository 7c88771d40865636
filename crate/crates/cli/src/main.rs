//! `dscnn`: file-based pipeline from a float model to scheduled, bit-exact
//! integer inference.
//!
//! Exit codes: 0 success, 1 error, 2 usage, 3 oracle mismatch.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_ORACLE_MISMATCH: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "dscnn", version, about = "Quantize, map and simulate depthwise-separable CNNs on a streaming accelerator model")]
pub struct Cli {
    /// Pipeline configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Seed for generated weights, calibration data and test inputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Architecture: mobilenet_v2, efficientnet_compressed or toy.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a model manifest for a built-in architecture.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        /// Omit weights (enough for counting and compiling).
        #[arg(long)]
        shape_only: bool,
        /// Manifest path; defaults to `<out-dir>/model/model.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fold batch norms into convolutions.
    Fuse {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Record per-channel activation ranges.
    Calibrate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of raw little-endian f32 input tensors (`*.bin`);
        /// seeded random inputs when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Build the quantized network.
    Quantize {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Map a network onto compute units and emit the schedule.
    Compile {
        /// Quantized network; a float or shape-only model also works.
        #[arg(long)]
        qnet: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Device profile (TOML), overriding the config.
        #[arg(long)]
        device: Option<PathBuf>,
    },
    /// Run scheduled inference.
    Simulate {
        #[arg(long)]
        qnet: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Raw little-endian f32 input tensor; seeded random when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Number of seeded random inputs.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Write the DDR transaction table.
        #[arg(long)]
        trace: bool,
        /// Write the performance table.
        #[arg(long)]
        perf: bool,
        /// Compare against the layer-by-layer oracle; exit 3 on mismatch.
        #[arg(long)]
        oracle_check: bool,
    },
    /// Model-size, operation, resource and throughput tables.
    Report {
        #[arg(long)]
        arch: Option<String>,
        /// Directory of model manifests to count instead of built-in graphs.
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
