//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "specdec",
    version,
    about = "Speculative decoding with a dynamic draft tree over exact toy language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one generation and print the emitted token stream.
    Generate(GenerateArgs),
    /// Run several modes over a shared prompt set and report tau and the
    /// cost-model speedup estimate per mode.
    Bench(BenchArgs),
    /// Run the four ablation arms (eagle2, no_value, no_rerank, no_both) at
    /// equal budgets and report the tau table with paired significance.
    Ablate(AblateArgs),
    /// Certify losslessness: Monte Carlo generations against the exact
    /// autoregressive distribution, plus the exhaustive small-tree
    /// verification suite. Exit code 0 only on pass.
    Certify(CertifyArgs),
    /// Measure confidence calibration and per-position acceptance.
    Calibrate(CalibrateArgs),
    /// Write a seeded random model file.
    GenModel(GenModelArgs),
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ModelArgs {
    /// Target model file.
    #[arg(long, value_name = "FILE")]
    pub target: PathBuf,
    /// Draft model file; when absent the draft is the target distorted by
    /// --distortion.
    #[arg(long, value_name = "FILE")]
    pub draft: Option<PathBuf>,
    /// Draft distortion: none, temperature:G, mix:L, or swap_mass:E.
    #[arg(long, default_value = "none", conflicts_with = "draft")]
    pub distortion: String,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct BudgetArgs {
    /// Draft tree depth (expansion steps per cycle).
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    /// Nodes expanded per layer.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Candidate children drafted per expanded node.
    #[arg(long, default_value_t = 10)]
    pub branch: usize,
    /// Total draft tokens kept after reranking.
    #[arg(long, default_value_t = 60)]
    pub m: usize,
    /// Static tree layer widths for no_both, comma-separated; defaults to
    /// the widest prefix of the expansion budget.
    #[arg(long, value_name = "W1,W2,...")]
    pub shape: Option<String>,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct PromptArgs {
    /// Prompt file: one prompt per line, space-separated decimal token ids.
    #[arg(long, value_name = "FILE")]
    pub prompts: Option<PathBuf>,
    /// Prompts to synthesize from the target model when no file is given.
    #[arg(long, default_value_t = 100, conflicts_with = "prompts")]
    pub n_prompts: usize,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct CostArgs {
    /// Cost of one draft forward pass relative to one target forward pass.
    #[arg(long, default_value_t = 0.05)]
    pub draft_cost: f64,
    /// Fixed per-cycle overhead in target-forward units.
    #[arg(long, default_value_t = 0.0)]
    pub overhead: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// eagle2, no_value, no_rerank, no_both, chain_sps, or vanilla.
    #[arg(long, default_value = "eagle2")]
    pub mode: String,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    /// Optional prompt file; the first prompt is used (default: empty prompt).
    #[arg(long, value_name = "FILE")]
    pub prompts: Option<PathBuf>,
    /// Write the machine-readable report here.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Include the per-cycle flattened draft (with masks) in the report.
    #[arg(long)]
    pub dump_tree: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    /// Modes to benchmark; repeat the flag or give a comma-separated list.
    #[arg(long = "mode", required = true, value_delimiter = ',', value_name = "MODE")]
    pub modes: Vec<String>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, default_value_t = 128)]
    pub max_tokens: usize,
    #[command(flatten)]
    pub prompt_set: PromptArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Calibration bins in the per-mode reports.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, default_value_t = 128)]
    pub max_tokens: usize,
    #[command(flatten)]
    pub prompt_set: PromptArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value = "eagle2")]
    pub mode: String,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Certification horizon L: sequences of this length are compared
    /// against the exact oracle (the V^L space must stay enumerable).
    #[arg(long, default_value_t = 3)]
    pub max_tokens: usize,
    /// Monte Carlo generations.
    #[arg(long, default_value_t = 200_000)]
    pub n_samples: u64,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Test-only: perturb every acceptance probability by +0.05 (clamped).
    /// Certification is expected to fail under this flag.
    #[arg(long)]
    pub inject_bias: bool,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value = "eagle2")]
    pub mode: String,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: usize,
    #[command(flatten)]
    pub prompt_set: PromptArgs,
    #[command(flatten)]
    pub cost: CostArgs,
    /// Confidence bins over [0, 1].
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Write plot data (bin_lo,bin_hi,mean_conf,acc_rate,count) here.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenModelArgs {
    /// Output model file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dirichlet concentration; small values give spiky rows.
    #[arg(long, default_value_t = 0.5)]
    pub concentration: f64,
}
