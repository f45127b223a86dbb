use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use evograph_core::eval::ReportFormat;
use evograph_core::gnn::NormInference;
use evograph_core::losses::Variant;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "EVOGRAPHNET_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "evographnet",
    version,
    about = "Predict brain connectivity graphs at future timepoints from a single baseline"
)]
pub struct Cli {
    /// Root for default output directories.
    #[arg(long, global = true, env = OUT_ENV, default_value = "evographnet-out")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal dataset.
    GenData(GenDataArgs),
    /// Cross-validate one or more loss variants and save the cascades.
    Train(TrainArgs),
    /// Score saved cascades on their held-out folds.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Roll a trained cascade forward from one baseline graph.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 30)]
    pub subjects: usize,
    #[arg(long, default_value_t = 35)]
    pub rois: usize,
    #[arg(long, default_value_t = 3)]
    pub timepoints: usize,
    #[arg(long, default_value_t = 0.05)]
    pub drift: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Fraction of edges moved by each transition's drift pattern.
    #[arg(long, default_value_t = 0.1)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Dataset directory [default: <out-root>/data].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest file, or the directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variants: full, no_kl, no_kl_plus_topology.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    pub variant: Vec<Variant>,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    /// Predicted timepoints [default: all follow-ups in the dataset].
    #[arg(long)]
    pub m: Option<usize>,
    /// Adversarial weight.
    #[arg(long, default_value_t = 2.0)]
    pub lambda1: f64,
    /// l1 weight.
    #[arg(long, default_value_t = 2.0)]
    pub lambda2: f64,
    /// KL (or topology) weight.
    #[arg(long, default_value_t = 0.001)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Generator hidden width [default: number of ROIs].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Discriminator hidden width [default: number of ROIs].
    #[arg(long)]
    pub disc_hidden: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub lr_g: f64,
    #[arg(long, default_value_t = 0.0002)]
    pub lr_d: f64,
    /// AdamW weight decay for both networks.
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Lower bound on per-node standard deviations in the KL term.
    #[arg(long, default_value_t = 1e-6)]
    pub sigma_floor: f64,
    /// Backpropagate later-stage losses into earlier generators.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub chain_backprop: bool,
    /// Batch-norm statistics used at prediction time.
    #[arg(long, value_enum, default_value = "graph")]
    pub norm_inference: NormArg,
    /// Disable data parallelism.
    #[arg(long)]
    pub sequential: bool,
    /// Run directory [default: <out-root>/run].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum NormArg {
    Graph,
    Running,
}

impl From<NormArg> for NormInference {
    fn from(a: NormArg) -> Self {
        match a {
            NormArg::Graph => NormInference::Graph,
            NormArg::Running => NormInference::Running,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset to score [default: the one the run was trained on].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to these variants [default: every trained variant].
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<Variant>,
    /// Comma-separated report formats: table, csv, json.
    #[arg(long, value_delimiter = ',', default_value = "table,csv")]
    pub format: Vec<ReportFormat>,
    /// Score freshly initialised cascades instead of the checkpoints.
    #[arg(long)]
    pub untrained: bool,
    /// Report directory [default: the run directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    /// Relative tolerance for every component [default: 1e-5 linear, 1e-3 otherwise].
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory with stage<i>.json checkpoints, e.g. <run>/full/fold0.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Baseline connectivity matrix (CSV).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory [default: <out-root>/predict].
    #[arg(long)]
    pub out: Option<PathBuf>,
}
