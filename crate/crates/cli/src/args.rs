use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use kvprune::{HeadMode, Interleave, PolicyKind, SweepAxis};

#[derive(Debug, Parser)]
#[command(name = "kvprune", version, about = "Modality-aware KV cache pruning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic attention trace.
    GenTrace(GenTraceArgs),
    /// Replay one policy and write one CSV row per step event.
    Simulate(SimulateArgs),
    /// Vary one parameter over a grid and write one summary row per policy and grid value.
    Sweep(SweepArgs),
    /// Per-layer intra/inter divergence and density curves of a trace.
    Analyze(AnalyzeArgs),
    /// Replay several policies on the same input and join their step events.
    Compare(CompareArgs),
}

/// Synthetic model overrides; any flag given here wins over the config file.
#[derive(Debug, Args, Default, Clone)]
pub struct SynthArgs {
    #[arg(long = "text-tokens")]
    pub text_tokens: Option<usize>,
    #[arg(long = "visual-tokens")]
    pub visual_tokens: Option<usize>,
    /// block | alternating | random
    #[arg(long, value_parser = parse_from_str::<Interleave>)]
    pub interleave: Option<Interleave>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "head-dim")]
    pub head_dim: Option<usize>,
    /// Trace steps including the prefill step.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long = "obs-rows")]
    pub obs_rows: Option<usize>,
}

/// Pruning overrides.
#[derive(Debug, Args, Default, Clone)]
pub struct PruneArgs {
    /// Budget as a fraction of the final sequence length; 1 or more disables eviction.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub recent: Option<usize>,
    #[arg(long)]
    pub obs: Option<usize>,
    /// Smoothing constant of the n-softmax.
    #[arg(long)]
    pub n: Option<f64>,
    #[arg(long = "recency-bias")]
    pub recency_bias: Option<f64>,
    /// Grow both top-k lists until the intersection fills the pool.
    #[arg(long)]
    pub widen: bool,
    /// averaged | per-head
    #[arg(long = "head-mode", value_parser = parse_from_str::<HeadMode>)]
    pub head_mode: Option<HeadMode>,
    #[arg(long = "pool-width")]
    pub pool_width: Option<usize>,
    /// Use the n-softmax for the baselines too.
    #[arg(long = "smooth-baselines")]
    pub smooth_baselines: bool,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the synthetic model and for replayed keys and values.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recorded trace to replay instead of the synthetic model.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub prune: PruneArgs,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// csp | global-topk | accum | full
    #[arg(long, default_value = "csp", value_parser = parse_from_str::<PolicyKind>)]
    pub policy: PolicyKind,
    /// Also write the run summary row to this CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// budget | ratio | n
    #[arg(long, value_parser = parse_from_str::<SweepAxis>)]
    pub axis: SweepAxis,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',', default_value = "csp", value_parser = parse_from_str::<PolicyKind>)]
    pub policies: Vec<PolicyKind>,
    /// SVG chart of mean reconstruction error against the grid.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub trace: PathBuf,
    /// Directory for divergence.csv, density.csv and the SVG charts.
    #[arg(long = "out-dir", default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub obs: Option<usize>,
    #[arg(long)]
    pub recent: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated policies, at least two.
    #[arg(long, value_delimiter = ',', default_value = "csp,global-topk,accum,full", value_parser = parse_from_str::<PolicyKind>)]
    pub policies: Vec<PolicyKind>,
    /// Also write one summary row per policy to this CSV.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn parse_from_str<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}
