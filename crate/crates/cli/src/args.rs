use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "loki", version, about = "Low-dimensional key sparse attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic low-rank key dump (LKD1).
    Gen(GenArgs),
    /// Fit one PCA projection (LKP1) per (layer, head, stage).
    Calibrate(CalibrateArgs),
    /// Report Rank@v for every key dump.
    Rank(RankArgs),
    /// Run an attention method over a key/value cache for each query.
    Run(RunArgs),
    /// Jaccard agreement between reduced and full-dimension top-k selection.
    Agree(AgreeArgs),
    /// Phase-level timing breakdown across sequence lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seq: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub layer: u32,
    #[arg(long, default_value_t = 0)]
    pub head: u32,
    #[arg(long, value_enum, default_value_t = Stage::Post)]
    pub stage: Stage,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Key dumps; files sharing (layer, head, stage) are pooled.
    #[arg(long, num_args = 1.., required = true)]
    pub keys: Vec<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub keys: Vec<PathBuf>,
    /// Explained-variance thresholds in percent.
    #[arg(long, value_delimiter = ',', default_value = "90,95,99")]
    pub v: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Vanilla,
    Loki,
    ExactTopk,
    PcaAttn,
    H2o,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompositionArg {
    RotateThenProject,
    ProjectThenRotate,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub values: PathBuf,
    /// One query per row. For h2o, one per key (the causal stream).
    #[arg(long)]
    pub queries: PathBuf,
    /// Required by loki and pca-attn.
    #[arg(long)]
    pub proj: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Key budget fraction (h2o: cache budget fraction).
    #[arg(long, default_value_t = 0.25)]
    pub kf: f64,
    /// Reduced dimension fraction.
    #[arg(long, default_value_t = 0.25)]
    pub df: f64,
    /// How a projection meets RoPE when the inputs are pre-rotary.
    #[arg(long, value_enum, default_value_t = CompositionArg::RotateThenProject)]
    pub composition: CompositionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AgreeArgs {
    #[arg(long)]
    pub keys: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub proj: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5")]
    pub kf_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.125,0.25,0.5,1.0")]
    pub df_grid: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMethodArg {
    Vanilla,
    Loki,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_value = "vanilla,loki")]
    pub method: Vec<BenchMethodArg>,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,3072,4096")]
    pub seq_list: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub kf: f64,
    #[arg(long, default_value_t = 0.25)]
    pub df: f64,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Queries per step.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}
