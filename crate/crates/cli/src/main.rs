//! `spq`: train SPQ models, build packed-code indexes, search and evaluate.

mod commands;
mod datasets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "spq", version, about = "Self-supervised product quantization: train, index, search, evaluate")]
pub struct Cli {
    /// Run configuration file (`key=value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed override for training, baselines and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Worker threads; 0 picks automatically.
    #[arg(long, global = true, env = "SPQ_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and codebooks; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Encode a gallery with a checkpoint into an SPQI index.
    Encode(EncodeArgs),
    /// Rank index items for each query by asymmetric distance.
    Search(SearchArgs),
    /// Compute mAP@R, P@k and a PR curve.
    Evaluate(EvaluateArgs),
    /// Classical k-means product quantization of a gallery.
    BaselinePq(BaselineArgs),
    /// Generate clustered synthetic descriptor data.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Gallery inputs: `[N, D]` descriptors or `[N, H, W, 3]` images (SPQT).
    #[arg(long)]
    pub input: PathBuf,
    /// Labels to store in the index (class ids `[N]` or multi-hot `[N, L]`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Index output path (default `<out>/index.spqi`).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Also write the encoded descriptors as an f32 SPQT tensor.
    #[arg(long)]
    pub descriptors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Query descriptors `[Q, D]`, or raw inputs when `--checkpoint` is given.
    #[arg(long)]
    pub queries: PathBuf,
    /// Encode the queries with this checkpoint first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Results per query; clamped to the index size.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// CSV output path (default `<out>/results.csv`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long)]
    pub query_labels: PathBuf,
    /// Gallery labels; defaults to the index's label block.
    #[arg(long)]
    pub gallery_labels: Option<PathBuf>,
    /// Ranking depth for mAP@R.
    #[arg(long, default_value_t = 1000)]
    pub r: usize,
    /// Cutoffs for P@k.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
    pub k: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Gallery descriptors `[N, D]` to encode.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Descriptors to fit the codebooks on (default: the gallery).
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 25)]
    pub iters: usize,
    /// Index output path (default `<out>/baseline.spqi`).
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Training items (split evenly across clusters).
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub query: usize,
    #[arg(long, default_value_t = 2000)]
    pub gallery: usize,
}

/// Exit status for a failed run: 1 for usage and configuration problems,
/// 2 for bad or unreadable data.
fn exit_code(err: &anyhow::Error) -> u8 {
    use spq_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Usage(_) | E::Config(_) | E::Parameter(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
