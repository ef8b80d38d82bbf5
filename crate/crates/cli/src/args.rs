use std::path::PathBuf;

use asap_core::harness::{LayoutSpec, ToyDecoderConfig};
use asap_core::masking::{HeadAggregation, MaskConfig};
use asap_core::{PruneConfig, SelectionMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "asap", version, about = "Visual-token pruning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one pruning pass and print the result as JSON.
    Prune(PruneArgs),
    /// Print the FLOPs and KV-cache report for one or more schedules as CSV.
    Flops(FlopsArgs),
    /// Write a grayscale trace of a pruning pass.
    Trace(TraceArgs),
    /// Run the toy decoder end to end and print a JSON report.
    Demo(HarnessArgs),
    /// Time the pipeline stages.
    Bench(BenchArgs),
}

impl Command {
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Command::Prune(a) => a.input.harness.seed = seed,
            Command::Trace(a) => a.input.harness.seed = seed,
            Command::Demo(h) => h.seed = seed,
            Command::Bench(b) => b.harness.seed = seed,
            Command::Flops(_) => {}
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Selection {
    TextAttention,
    Salience,
}

fn parse_head_agg(s: &str) -> Result<HeadAggregation, String> {
    match s {
        "mean" => Ok(HeadAggregation::Mean),
        "sum" => Ok(HeadAggregation::Sum),
        _ => s
            .strip_prefix("head:")
            .and_then(|n| n.parse().ok())
            .map(HeadAggregation::Single)
            .ok_or_else(|| format!("expected mean, sum or head:N, got {s:?}")),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r = r
        .trim()
        .parse()
        .map_err(|_| format!("bad row count in {s:?}"))?;
    let c = c
        .trim()
        .parse()
        .map_err(|_| format!("bad column count in {s:?}"))?;
    Ok((r, c))
}

#[derive(Debug, Clone, Args)]
pub struct PruneOpts {
    /// Visual tokens to keep.
    #[arg(long, default_value_t = 16)]
    pub budget: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Cosine similarity above which selected tokens merge; 1.0 disables merging.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = Selection::TextAttention)]
    pub selection: Selection,
    /// mean, sum or head:N.
    #[arg(long, default_value = "mean", value_parser = parse_head_agg)]
    pub head_agg: HeadAggregation,
}

impl PruneOpts {
    pub fn to_config(&self) -> PruneConfig {
        PruneConfig {
            budget_k: self.budget,
            similarity_threshold: self.threshold,
            selection_mode: match self.selection {
                Selection::TextAttention => SelectionMode::TextAttention,
                Selection::Salience => SelectionMode::Salience,
            },
            mask: MaskConfig {
                lambda_max: self.lambda_max,
                epsilon: self.epsilon,
            },
            head_aggregation: self.head_agg,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct HarnessArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn_m: usize,
    /// Layer after which pruning is applied (0-based).
    #[arg(long, default_value_t = 2)]
    pub prune_layer: usize,
    #[arg(long, default_value_t = 4)]
    pub system_tokens: usize,
    #[arg(long, default_value_t = 64)]
    pub visual_tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub text_tokens: usize,
    /// Synthetic visual tokens cluster around this many prototypes.
    #[arg(long, default_value_t = 8)]
    pub prototypes: usize,
    #[command(flatten)]
    pub prune: PruneOpts,
}

impl HarnessArgs {
    pub fn decoder_config(&self) -> ToyDecoderConfig {
        ToyDecoderConfig {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            ffn_m: self.ffn_m,
            prune_layer: self.prune_layer,
            seed: self.seed,
            ..ToyDecoderConfig::default()
        }
    }

    pub fn layout_spec(&self) -> LayoutSpec {
        LayoutSpec {
            system: self.system_tokens,
            visual: self.visual_tokens,
            text: self.text_tokens,
            dim: self.heads * self.head_dim,
            prototypes: self.prototypes,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Generate inputs with the toy decoder instead of reading files.
    #[arg(long, conflicts_with_all = ["hidden", "queries", "keys"])]
    pub synthetic: bool,
    /// Hidden states (ASAPMAT1 file).
    #[arg(long)]
    pub hidden: Option<PathBuf>,
    /// Single-head queries (ASAPMAT1 file).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Single-head keys (ASAPMAT1 file).
    #[arg(long)]
    pub keys: Option<PathBuf>,
    #[command(flatten)]
    pub harness: HarnessArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Also write the compressed hidden states here.
    #[arg(long)]
    pub out_hidden: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TraceKind {
    /// Per-token outcome: kept, salvaged, merged away or dropped.
    Fate,
    /// Forward-visibility penalty from salience.
    Penalty,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output PGM (P2) path.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid as ROWSxCOLS; defaults to a square grid.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value_t = TraceKind::Fate)]
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// llava-1.5-7b, llava-1.5-13b or llava-next-7b.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub hidden_d: Option<u64>,
    #[arg(long)]
    pub ffn_m: Option<u64>,
    #[arg(long)]
    pub layers: Option<u64>,
    #[arg(long)]
    pub visual_tokens: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub kv_bytes_per_elem: u64,
    /// `[ID=]SCHEDULE` where SCHEDULE is a JSON stage list or a path to one.
    /// Stages are `{"layers":L,"tokens":N}` or `{"layers":L,"ratio":R}`.
    #[arg(long)]
    pub schedule: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub harness: HarnessArgs,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
}
