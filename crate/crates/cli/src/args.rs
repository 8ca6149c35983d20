use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "proalign", version, about = "Prototype-based slide embeddings and probes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with planted prototypes.
    Synth(SynthArgs),
    /// Build the initial prototype bank from training patches.
    InitPrototypes(InitArgs),
    /// Embed slides with a prototype bank (or a pooling baseline).
    Embed(EmbedArgs),
    /// Train one probe per seed on slide embeddings.
    Train(TrainArgs),
    /// Evaluate trained probes on one split.
    Eval(EvalArgs),
    /// Repeat init, embed, train and eval over several prototype counts.
    Sweep(SweepArgs),
    /// Report how one slide's patches distribute over prototypes.
    Allocmap(AllocmapArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n_proto: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 60)]
    pub val: usize,
    #[arg(long, default_value_t = 60)]
    pub test: usize,
    #[arg(long, default_value_t = 50)]
    pub min_patches: usize,
    #[arg(long, default_value_t = 200)]
    pub max_patches: usize,
    /// Minimum distance between prototype centers, in units of --noise-std.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// RMS norm of the per-patch noise vector.
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Also write text_bank_<k>.json for each of these prototype counts.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,24,32")]
    pub sweep_sizes: Vec<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Text,
    Kmeans,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct InitOptions {
    #[arg(long, value_enum, default_value_t = InitMethod::Text)]
    pub method: InitMethod,
    /// Patches sampled per prototype for the training pool.
    #[arg(long, default_value_t = 100_000)]
    pub patches_per_proto: usize,
    /// Seed for pool sampling and k-means.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// L2-normalize patch and text rows before taking dot products.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct InitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Required for --method text.
    #[arg(long)]
    pub text_bank: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub n_proto: usize,
    #[command(flatten)]
    pub init: InitOptions,
    /// Bank matrix path; the sidecar goes next to it with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Mean,
    Max,
}

#[derive(Args, Debug, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prototype bank from init-prototypes (not needed with --baseline).
    #[arg(long, required_unless_present = "baseline")]
    pub prototypes: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores, capped by PROALIGN_THREADS).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Pool patches instead of using prototypes.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Patches listed per prototype in the allocation reports.
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeArg {
    Linear,
    Mlp,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct ProbeOptions {
    #[arg(long, value_enum, default_value_t = ProbeArg::Linear)]
    pub probe: ProbeArg,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Embedding manifest written by `embed`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub probe: ProbeOptions,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub models_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding text_bank_<k>.json for every count (method text).
    #[arg(long)]
    pub text_bank_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,24,32")]
    pub n_proto_list: Vec<usize>,
    #[command(flatten)]
    pub init: InitOptions,
    #[command(flatten)]
    pub probe: ProbeOptions,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AllocmapArgs {
    /// Patch matrix of one slide.
    #[arg(long)]
    pub slide: PathBuf,
    /// Defaults to the slide file's stem.
    #[arg(long)]
    pub slide_id: Option<String>,
    #[arg(long)]
    pub prototypes: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}
