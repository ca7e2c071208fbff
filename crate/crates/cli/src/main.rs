//! `axialseg`: data generation, training, evaluation, benchmarking and
//! gradient checks for the axial-attention segmentation engine.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use axialseg::bench::BenchVariant;
use axialseg::segmodel::AttentionVariant;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "axialseg", version, about = "Gated axial-attention lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic image/mask dataset as PGM pairs.
    GenData(GenDataArgs),
    /// Train a model on a PGM dataset and save a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; prints one CSV row.
    Eval(EvalArgs),
    /// Count multiply-adds and time dense vs axial attention.
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of one attention variant.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub occluders: usize,
    #[arg(long)]
    pub radius_min: Option<f64>,
    #[arg(long)]
    pub radius_max: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub max_lesions: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_parser = parse_variant)]
    pub variant: AttentionVariant,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// BCE weight in the BCE + Dice loss.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub downsample: usize,
    /// Fraction held out for per-epoch validation (0 trains on everything).
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_bench_variant, default_value = "full2d,axial")]
    pub variants: Vec<BenchVariant>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CheckVariant {
    Full2d,
    Relpos2d,
    Axial,
    Gated,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub variant: CheckVariant,
    #[arg(long, default_value_t = axialseg::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_variant(s: &str) -> Result<AttentionVariant, String> {
    s.parse().map_err(|e: axialseg::Error| e.to_string())
}

fn parse_bench_variant(s: &str) -> Result<BenchVariant, String> {
    s.parse().map_err(|e: axialseg::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
