//! `swiftkv`: command-line front end for the SwiftKV laboratory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "swiftkv",
    version,
    about = "Prefill-reduction laboratory: toy models, distillation, FLOPs and serving simulation"
)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomly initialise a model from [model] and save it.
    Init {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewire a model checkpoint into a SwiftKV student.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Student checkpoint directory to create.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        swift: SwiftArgs,
    },
    /// Distil a student (or a freshly rewired model) on a synthetic corpus.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the checkpoint, loss.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        swift: SwiftArgs,
    },
    /// Greedy generation from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated token ids.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
        #[arg(long, value_enum, default_value_t = GenMode::Teacher)]
        mode: GenMode,
        /// Store the KV cache as per-token FP8.
        #[arg(long)]
        fp8: bool,
        /// Use the exit head when it is confident enough (swiftkv mode).
        #[arg(long)]
        early_exit: bool,
        /// Directory to write generate.json into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer hidden-state similarity profile.
    Simscore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated token ids; a seeded random prompt is used when absent.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also compare against the final hidden state.
        #[arg(long)]
        include_final: bool,
        /// Directory to write simscore.csv into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prefill GFlops per token, broken down by component.
    Flops {
        #[arg(long, default_value = "llama70b")]
        preset: String,
        /// Skipped-layer fraction; without it the four standard rows are printed.
        #[arg(long)]
        swiftkv: Option<f64>,
        /// AcrossKV group size (bare flag means 4).
        #[arg(long, num_args = 0..=1, default_value_t = 1, default_missing_value = "4")]
        acrosskv: usize,
        /// Baseline attention GFlops per token to calibrate the context length.
        #[arg(long, default_value_t = 160.0)]
        attn_gflops: f64,
        #[arg(long, default_value_t = 1.0)]
        causal_factor: f64,
        /// Directory to write flops.csv into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the serving simulator on [workload], [engine], [hardware].
    Simulate {
        /// Output directory for requests.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Poisson arrival rate override.
        #[arg(long)]
        rate: Option<f64>,
        /// Also simulate the unmodified model and report the throughput ratio.
        #[arg(long)]
        compare_baseline: bool,
    },
    /// Throughput of the memory-study variants across capacities. Lengths come
    /// from [workload]; arrivals are closed-loop so memory, not load, limits batching.
    Memstudy {
        #[arg(long, value_delimiter = ',', default_value = "80,40,20,17")]
        capacities_gb: Vec<f64>,
        #[arg(long, default_value_t = 256)]
        concurrency: usize,
        #[arg(long, default_value_t = 512)]
        requests: usize,
        /// Directory to write memstudy.csv into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        tokens: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Directory to write gradcheck.json into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct SwiftArgs {
    /// Number of layers kept on the original wiring.
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    early_exit: bool,
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Qkv,
    FullLayers,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GenMode {
    Teacher,
    Swiftkv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
