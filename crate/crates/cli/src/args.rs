//! Command-line flags. Every tunable is optional so that a `--config` JSON
//! file can fill in whatever the flags leave unset.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "tagunet", version, about = "Topology-agnostic graph U-Net surrogates for mesh fields")]
pub struct Cli {
    /// Worker threads for per-shape generation, hierarchy building and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Synth(SynthArgs),
    /// Precompute the hierarchy cache, or inspect one shape's hierarchy.
    Hierarchy(HierarchyArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Write per-node predictions for every shape of a split.
    Predict(PredictArgs),
    /// Score a checkpoint on one or both splits.
    Evaluate(EvaluateArgs),
    /// Train several models identically and tabulate their R² medians.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HierarchyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long)]
    pub cluster_size: Option<usize>,
    #[arg(long, default_value_t = tagunet::hierarchy::DEFAULT_KNN)]
    pub knn: usize,
    /// Print level sizes for this shape instead of filling the whole cache.
    #[arg(long)]
    pub inspect: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    EdgeconvUnet,
    GcnconvUnet,
    PlainGnn,
}

impl ModelName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::EdgeconvUnet => "edgeconv-unet",
            ModelName::GcnconvUnet => "gcnconv-unet",
            ModelName::PlainGnn => "plain-gnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size reference widths for the dataset's dimension.
    Reference,
    /// Narrow widths for desk-scale runs.
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Test,
    All,
}

/// Architecture flags.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOpts {
    #[arg(long, value_enum)]
    pub model: Option<ModelName>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Hidden sizes of each EdgeConv MLP, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub conv_hidden: Option<Vec<usize>>,
    /// Output channels of every conv layer.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub output_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub lift_width: Option<usize>,
    #[arg(long)]
    pub cluster_size: Option<usize>,
    /// Neighbours per coarse node when rebuilding edges.
    #[arg(long)]
    pub knn: Option<usize>,
}

/// Optimizer flags.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Train on raw targets instead of z-scores.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_standardize: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with any of the model and optimizer options; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Classify nodes as positive when the value exceeds this threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write predicted-vs-actual scatter CSVs.
    #[arg(long)]
    pub scatter: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "edgeconv-unet,gcnconv-unet,plain-gnn"
    )]
    pub models: Vec<ModelName>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

/// Options a `--config` file may carry.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelOpts,
    pub train: TrainOpts,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )+
    };
}

impl RunConfig {
    /// Flag values take precedence over `file`.
    pub fn merge(flags: RunConfig, file: Option<RunConfig>) -> RunConfig {
        let mut out = flags;
        if let Some(file) = file {
            overlay!(
                out.model,
                file.model,
                model,
                preset,
                depth,
                conv_hidden,
                channels,
                output_hidden,
                lift_width,
                cluster_size,
                knn
            );
            overlay!(
                out.train,
                file.train,
                epochs,
                lr,
                batch,
                seed,
                checkpoint_every,
                clip_norm,
                no_standardize
            );
        }
        out
    }
}
