//! `rbnn`: train, export, run, and analyze residual-binarized networks.
//!
//! Exit codes: 0 success, 2 input error, 3 integrity error, 4 numeric abort.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "rbnn", version, about = "Residual-binarized neural networks")]
pub(crate) struct Cli {
    #[command(subcommand)]
    pub(crate) command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense network and write a checkpoint plus a learning curve.
    Train(TrainArgs),
    /// Binarize a checkpoint into a model container.
    Export(ExportArgs),
    /// Classify inputs with the reference forward pass.
    Infer(InferArgs),
    /// Run inputs through the accelerator simulator and write a report.
    Sim(SimArgs),
    /// Cost analyses: widening, XNOR-net overhead, sliding-window overhead.
    Report(ReportArgs),
    /// Compare straight-through gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub(crate) struct TrainArgs {
    /// `arch1`, or comma-separated dense widths such as `4,16,2`.
    #[arg(long, default_value = "arch1")]
    pub(crate) arch: String,
    /// MNIST directory (IDX files) or a CSV file of features then label.
    #[arg(long)]
    pub(crate) dataset: PathBuf,
    /// Evaluation CSV; MNIST directories use their test split.
    #[arg(long)]
    pub(crate) test: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub(crate) levels: usize,
    #[arg(long, default_value_t = 20)]
    pub(crate) epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub(crate) lr: f64,
    #[arg(long, default_value_t = 100)]
    pub(crate) batch_size: usize,
    /// Use the first N training rows only.
    #[arg(long)]
    pub(crate) limit: Option<usize>,
    /// Continue from an earlier checkpoint.
    #[arg(long)]
    pub(crate) resume: Option<PathBuf>,
    /// Checkpoint output.
    #[arg(long)]
    pub(crate) out: PathBuf,
    /// Learning curve output, one JSON object per epoch.
    #[arg(long)]
    pub(crate) curve: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct ExportArgs {
    #[arg(long)]
    pub(crate) checkpoint: PathBuf,
    /// PE count per layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub(crate) pe: Option<Vec<usize>>,
    /// SIMD width per layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub(crate) simd: Option<Vec<usize>>,
    #[arg(long, default_value = "model")]
    pub(crate) name: String,
    #[arg(long)]
    pub(crate) out: PathBuf,
}

#[derive(Args)]
pub(crate) struct InputArgs {
    /// MNIST directory (test split) or CSV file with labels.
    #[arg(long)]
    pub(crate) input: PathBuf,
    /// Classify only this row and print its class index.
    #[arg(long)]
    pub(crate) index: Option<usize>,
    /// Use the first N rows only.
    #[arg(long)]
    pub(crate) limit: Option<usize>,
    /// Write one predicted class per line.
    #[arg(long)]
    pub(crate) predictions: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct InferArgs {
    #[arg(long)]
    pub(crate) model: PathBuf,
    #[command(flatten)]
    pub(crate) input: InputArgs,
}

#[derive(Args)]
pub(crate) struct SimArgs {
    #[arg(long)]
    pub(crate) model: PathBuf,
    #[command(flatten)]
    pub(crate) input: InputArgs,
    /// Clock frequency in MHz.
    #[arg(long, default_value_t = 200.0)]
    pub(crate) clock: f64,
    /// Cycles added to every pipeline stage.
    #[arg(long, default_value_t = 0)]
    pub(crate) overhead_cycles: u64,
    #[arg(long)]
    pub(crate) report: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct ReportArgs {
    /// Model container to analyze.
    #[arg(long, conflicts_with = "arch")]
    pub(crate) model: Option<PathBuf>,
    /// Built-in topology instead of a container: `arch1` or `arch2`.
    #[arg(long)]
    pub(crate) arch: Option<String>,
    /// Levels for `--arch`.
    #[arg(long, default_value_t = 1)]
    pub(crate) levels: usize,
    /// Op-count ratio after multiplying hidden widths by W.
    #[arg(long)]
    pub(crate) widen: Option<f64>,
    /// Memory ratio of per-window scaling factors.
    #[arg(long)]
    pub(crate) xnor_overhead: bool,
    #[arg(long, default_value_t = 3)]
    pub(crate) kernel: u64,
    #[arg(long, default_value_t = 32)]
    pub(crate) height: u64,
    /// Filter count F for `--xnor-overhead`.
    #[arg(long, default_value_t = 64)]
    pub(crate) filters: u64,
    /// Bit width T; defaults to the model's fixed-point width.
    #[arg(long)]
    pub(crate) bits: Option<u32>,
    /// Sliding-window utilization per convolution layer, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub(crate) utilization: Option<Vec<f64>>,
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
}

#[derive(Args)]
pub(crate) struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub(crate) points: usize,
    #[arg(long, default_value_t = 2)]
    pub(crate) levels: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub(crate) epsilon: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub(crate) tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub(crate) seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Export(a) => commands::export(a),
        Command::Infer(a) => commands::infer(a),
        Command::Sim(a) => commands::sim(a),
        Command::Report(a) => commands::report(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
