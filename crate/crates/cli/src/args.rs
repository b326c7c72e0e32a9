use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "kvshare", version, about = "Cross-layer KV sharing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the KV map, iteration range and cache budget of a topology.
    Plan(PlanArgs),
    /// Write a freshly initialised checkpoint.
    Init(InitArgs),
    /// Train on a corpus and write checkpoints.
    Train(TrainArgs),
    /// Perplexity of a corpus under a checkpoint.
    EvalPpl(EvalArgs),
    /// Generate tokens from a prompt.
    Generate(GenerateArgs),
    /// Time prefill and decode over `x+y` pairs and emit CSV.
    Bench(BenchArgs),
    /// Re-target a standard checkpoint to a sharing topology.
    Convert(ConvertArgs),
}

/// Topology selection. Partitioning and positioning may be given
/// positionally (`pizza bottom`) or with flags.
#[derive(Debug, Args, Clone)]
pub struct TopoArgs {
    /// `[PARTITIONING] [POSITIONING]`
    #[arg(value_name = "TOPOLOGY", num_args = 0..=2)]
    pub spec: Vec<String>,
    #[arg(long)]
    pub partitioning: Option<String>,
    #[arg(long)]
    pub positioning: Option<String>,
    /// Total layers; defaults to the model's.
    #[arg(long)]
    pub layers: Option<usize>,
    /// KV layers; defaults to every layer.
    #[arg(long)]
    pub kv_layers: Option<usize>,
    /// Explicit 1-based map, e.g. `1,1,3,3`; overrides the other flags.
    #[arg(long)]
    pub kv_map: Option<String>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct IterArgs {
    /// Gradient-free iterations.
    #[arg(long, default_value_t = 7)]
    pub m: usize,
    /// Differentiable iterations.
    #[arg(long, default_value_t = 2)]
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenFormat {
    /// Raw bytes through the byte tokenizer.
    Bytes,
    /// Little-endian 16-bit ids.
    U16,
    /// Little-endian 32-bit ids.
    U32,
}

#[derive(Debug, Args, Clone)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = TokenFormat::Bytes)]
    pub format: TokenFormat,
    /// Vocabulary size of pre-tokenized corpora.
    #[arg(long, default_value_t = 32000)]
    pub vocab: usize,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// `tiny`, `110M` or `1.1B`.
    #[arg(long, default_value = "tiny")]
    pub model: String,
    /// Hidden size of the tiny model.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Vocabulary of the tiny model; defaults to the byte tokenizer's.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Context length of the tiny model.
    #[arg(long, default_value_t = 256)]
    pub max_len: usize,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub topo: TopoArgs,
    /// `110M` or `1.1B`.
    #[arg(long, default_value = "110M")]
    pub model: String,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    /// Bytes per cached scalar.
    #[arg(long, default_value_t = 2)]
    pub bytes: usize,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub topo: TopoArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub topo: TopoArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Named schedule: small-110M, small-1.1B or large-1.1B.
    #[arg(long, conflicts_with = "steps")]
    pub preset: Option<String>,
    /// Desk-scale schedule length.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long, default_value = "checkpoints")]
    pub checkpoint_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Append per-step metrics to this CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    /// Defaults to the window (non-overlapping).
    #[arg(long)]
    pub stride: Option<usize>,
    #[command(flatten)]
    pub iters: IterArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prompt text, byte-tokenized.
    #[arg(long, conflicts_with = "prompt_ids")]
    pub prompt: Option<String>,
    /// Prompt as comma-separated token ids.
    #[arg(long)]
    pub prompt_ids: Option<String>,
    /// Repeat or truncate the prompt to this many tokens.
    #[arg(long)]
    pub x: Option<usize>,
    /// Tokens to generate.
    #[arg(long, short = 'y', default_value_t = 32)]
    pub y: usize,
    /// `greedy`, `temperature:T` or `top-k:K[:T]`.
    #[arg(long, default_value = "greedy")]
    pub sampler: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub iters: IterArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated `x+y` pairs.
    #[arg(long, default_value = "5+16,64+16")]
    pub pairs: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub iters: IterArgs,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub topo: TopoArgs,
    #[arg(long)]
    pub out: PathBuf,
}
