//! `otdepth`: gradient audits, OT depth losses, toy training, mask sweeps
//! and metric evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "otdepth", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed [default: 42]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run configuration as `key = value` lines; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare every tape gradient with central finite differences
    Gradcheck(GradcheckArgs),
    /// OT cost between the depth histograms of two DTEN maps
    Otdl(OtdlArgs),
    /// Train the toy predictor with MSE, OT depth loss, or both
    Toytrain(ToytrainArgs),
    /// Sparse-pixel mask optimization over a list of sparsity weights
    Masksweep(MasksweepArgs),
    /// Depth metrics of a prediction against ground truth
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// tensor, dgr, otdl, losses or all [default: all]
    #[arg(long)]
    scope: Option<String>,
}

#[derive(Debug, Args)]
pub struct OtdlArgs {
    /// Predicted depth (DTEN)
    pred: PathBuf,
    /// Reference depth (DTEN)
    gt: PathBuf,
    /// exact1d, sinkhorn or lp [default: exact1d]
    #[arg(long)]
    solver: Option<String>,
    /// Number of histogram bins [default: 64]
    #[arg(long)]
    bins: Option<usize>,
    /// Lower edge of the first bin [default: 0.001]
    #[arg(long, allow_negative_numbers = true)]
    d_min: Option<f64>,
    /// Upper edge of the last bin [default: 10]
    #[arg(long, allow_negative_numbers = true)]
    d_max: Option<f64>,
    /// Soft-binning half-width in bins; 0 counts each value in one bin [default: 0]
    #[arg(long)]
    softness: Option<f64>,
    /// Sinkhorn regularization relative to the largest ground cost [default: 0.01]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Write the transport plan here (DTEN)
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToytrainArgs {
    /// Comma-separated subset of mse, otdl, both [default: mse,otdl,both]
    #[arg(long)]
    loss: Option<String>,
    /// Insert the depth gradient refinement block
    #[arg(long)]
    with_dgr: bool,
    /// Optimizer steps [default: 200]
    #[arg(long)]
    steps: Option<usize>,
    /// Weight of the OT term in the combined loss [default: 1]
    #[arg(long)]
    lambda_otdl: Option<f64>,
    /// Adam learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// Number of generated training scenes [default: 4]
    #[arg(long)]
    scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MasksweepArgs {
    /// cnn_toy or attn_toy [default: cnn_toy]
    #[arg(long)]
    predictor: Option<String>,
    /// Comma-separated ascending sparsity weights [default: 1,2,3,4,5,6]
    #[arg(long)]
    lambdas: Option<String>,
    /// Optimize one free logit per pixel instead of the mask network
    #[arg(long)]
    free_mask: bool,
    /// Gradient steps per weight [default: 300]
    #[arg(long)]
    steps: Option<usize>,
    /// Step size [default: 0.5, or 300 with --free-mask]
    #[arg(long)]
    lr: Option<f64>,
    /// Binarization cut [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Predictor checkpoint root; trained and saved when missing [default: <out>/checkpoints]
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted depth (DTEN)
    pred: PathBuf,
    /// Reference depth (DTEN)
    gt: PathBuf,
    /// Validity mask (DTEN); nonzero pixels are evaluated
    #[arg(long)]
    mask: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(&cli.common, a),
        Command::Otdl(a) => commands::otdl(&cli.common, a),
        Command::Toytrain(a) => commands::toytrain(&cli.common, a),
        Command::Masksweep(a) => commands::masksweep(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
