//! `repsfnet` command-line tool.
//!
//! Exit codes: 0 success, 1 validation error, 2 format or I/O error,
//! 3 numeric failure (equivalence or convergence).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use repsfnet::DType;

#[derive(Parser)]
#[command(name = "repsfnet", version, about = "Reparameterized large-kernel crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a randomly initialized model and write it as a weight bundle.
    Init(InitArgs),
    /// Merge every multi-branch layer and write a merged-only bundle.
    Reparam(ReparamArgs),
    /// Check merged against branch-form outputs, per block and end to end.
    Equiv(EquivArgs),
    /// Render a ground-truth density map from a point-annotation document.
    GenDensity(GenDensityArgs),
    /// Run the network on an image tensor.
    Forward(ForwardArgs),
    /// Count plus optimal-transport loss between two density maps.
    Loss(LossArgs),
    /// MAE and RMSE over paired count lists.
    Eval(EvalArgs),
    /// Parameter and multiply-accumulate counts at a given input size.
    Stats(StatsArgs),
    /// Wall-clock latency of forward passes.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct InitArgs {
    /// Model config JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
}

#[derive(Args)]
pub struct ReparamArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EquivArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Branch-form bundle to compare a merged-only bundle against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Absolute tolerance; defaults to 1e-4 for binary32 and 1e-10 for binary64.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// End-to-end probe size, WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64")]
    pub size: String,
}

#[derive(Args)]
pub struct GenDensityArgs {
    #[arg(long)]
    pub ann: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    pub sigma: f64,
    /// Geometry-adaptive bandwidth from k-nearest-neighbor distances.
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    /// Window half-width in sigmas.
    #[arg(long, default_value_t = 4.0)]
    pub truncate: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Fixed PGM cap instead of min-max scaling.
    #[arg(long)]
    pub pgm_cap: Option<f64>,
    /// Sum-pool to the output grid of this stride.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use merged kernels (implied for merged-only bundles).
    #[arg(long)]
    pub merged: bool,
}

#[derive(Args)]
pub struct LossArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Marginal L1 tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "l1")]
    pub count_loss: String,
    #[arg(long, default_value_t = 1.0)]
    pub count_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ot_weight: f64,
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSON array of counts or of tensor-file paths.
    #[arg(long)]
    pub pred_list: PathBuf,
    #[arg(long)]
    pub gt_list: PathBuf,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input size, WIDTHxHEIGHT.
    #[arg(long)]
    pub size: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Input size, WIDTHxHEIGHT.
    #[arg(long, default_value = "640x480")]
    pub size: String,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// merged, branch or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    /// Run at 640x480, 1280x960 and 1600x1184 instead of --size.
    #[arg(long)]
    pub table_sizes: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    let result = match cli.command {
        Command::Init(a) => commands::init(a),
        Command::Reparam(a) => commands::reparam(a),
        Command::Equiv(a) => commands::equiv(a),
        Command::GenDensity(a) => commands::gen_density(a),
        Command::Forward(a) => commands::forward(a),
        Command::Loss(a) => commands::loss(a),
        Command::Eval(a) => commands::eval(a),
        Command::Stats(a) => commands::stats(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
