//! Argument definitions. Every documented default is spelled out in the help text.

use std::path::PathBuf;

use biaslens::nn::ModelKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "biaslens", version, about = "Audit class-imbalance bias in small detection models and evaluate mitigations")]
pub struct Cli {
    /// Directory every output is written under
    #[arg(long, global = true, default_value = "biaslens-out")]
    pub out: PathBuf,

    /// Master seed; falls back to BIASLENS_SEED, then the config file [default: 0]
    #[arg(long, global = true, env = "BIASLENS_SEED")]
    pub seed: Option<u64>,

    /// JSON file with any of the flag values (snake_case keys); flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for independent seeds
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class counts, percentages and per-condition breakdown of a dataset
    Analyze(AnalyzeArgs),
    /// Rebalance a dataset by over/undersampling or draw a fixed-share subset
    Resample(ResampleArgs),
    /// Apply label-exact augmentations and write the new images and records
    Augment(AugmentArgs),
    /// Train one model, optionally tracking neuron behavior per epoch
    Train(TrainArgs),
    /// Train the unweighted baseline and write the pre-mitigation bias report
    Audit(AuditArgs),
    /// Retrain an audited run with a mitigation strategy and report the deltas
    Mitigate(MitigateArgs),
    /// Cost-sensitive retraining with weights recalibrated from validation recall
    Recalibrate(RecalibrateArgs),
    /// Print a report's summary and optionally recompute it
    Report(ReportArgs),
    /// Export an attention or relevance heatmap for one sample
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    #[value(name = "tiny_cnn", alias = "cnn")]
    TinyCnn,
    #[value(name = "tiny_vit", alias = "vit")]
    TinyVit,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::TinyCnn => ModelKind::TinyCnn,
            ModelArg::TinyVit => ModelKind::TinyVit,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// JSONL annotation manifest; image_refs are PGM paths relative to it
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Synthetic preset when no manifest is given: balanced or imbalanced-A-B-C [default: imbalanced-90-5-5]
    #[arg(long, conflicts_with = "manifest")]
    pub synthetic: Option<String>,

    /// Number of synthetic samples [default: 3000]
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// Training epochs [default: 50 for tiny_cnn, 30 for tiny_vit]
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Base learning rate [default: 0.001]
    #[arg(long)]
    pub learning_rate: Option<f64>,

    /// Mini-batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Decoupled weight decay [default: 0.0001 for tiny_cnn, 0.03 for tiny_vit]
    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Dropout rate [default: 0 for tiny_cnn, 0.1 for tiny_vit]
    #[arg(long)]
    pub dropout: Option<f64>,

    /// Weight of the box-regression term [default: 1]
    #[arg(long)]
    pub box_loss_weight: Option<f64>,

    /// constant | step:FACTOR:EVERY | linear:TO [default: step:0.9:10 for tiny_cnn, linear:0.00001 for tiny_vit]
    #[arg(long)]
    pub lr_schedule: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OptionOverrides {
    /// IoU threshold for detection matching [default: 0.5]
    #[arg(long)]
    pub iou_threshold: Option<f64>,

    /// Share of each class used for training [default: 0.7]
    #[arg(long)]
    pub train_fraction: Option<f64>,

    /// Share of each class used for validation [default: 0.15]
    #[arg(long)]
    pub val_fraction: Option<f64>,

    /// Probe samples per class for sensitivity/selectivity [default: 128]
    #[arg(long)]
    pub probe_per_class: Option<usize>,

    /// Units per layer whose sensitivity is measured [default: 8]
    #[arg(long)]
    pub sensitivity_neurons: Option<usize>,

    /// Selectivity change counted as a plateau [default: 0.01]
    #[arg(long)]
    pub plateau_delta: Option<f64>,

    /// Epochs a plateau must last [default: 5]
    #[arg(long)]
    pub plateau_window: Option<usize>,

    /// Attention-mass threshold for attention-guided augmentation [default: 0.3]
    #[arg(long)]
    pub tau_att: Option<f64>,

    /// Scale of attention-guided augmentation requests [default: 1]
    #[arg(long)]
    pub kappa: Option<f64>,

    /// In-box relevance threshold for relevance-informed sampling [default: 0.5]
    #[arg(long)]
    pub tau_rel: Option<f64>,

    /// FN-rate drop a class needs to count as improved [default: 0.02]
    #[arg(long)]
    pub fn_rate_drop: Option<f64>,

    /// AP gain a class needs to count as improved [default: 0.01]
    #[arg(long)]
    pub ap_gain: Option<f64>,

    /// Recalibration iteration budget [default: 10]
    #[arg(long)]
    pub max_iterations: Option<usize>,

    /// Recall gap at which recalibration stops [default: 0.05]
    #[arg(long)]
    pub epsilon_gap: Option<f64>,

    /// Recalibration step size eta [default: 0.5]
    #[arg(long)]
    pub eta: Option<f64>,

    /// Recall every class is pushed towards [default: 0.9]
    #[arg(long)]
    pub target_recall: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResampleModeArg {
    /// Raise every class to the largest count
    Oversample,
    /// Cut every class to the smallest count
    Undersample,
    /// Move every class to the median count
    Combined,
    /// Fixed budget with the largest class at --share
    Subset,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, value_enum, default_value = "oversample")]
    pub mode: ResampleModeArg,

    /// Total records drawn in subset mode
    #[arg(long, default_value_t = 300)]
    pub budget: usize,

    /// Dominant-class share in subset mode
    #[arg(long, default_value_t = 0.67)]
    pub share: f64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Comma-separated ops: fliph, flipv, rot90, rot180, rot270, brightness:D, contrast:F, zoom:F
    #[arg(long, default_value = "fliph")]
    pub ops: String,

    /// Apply every op to every record instead of one seeded op per record
    #[arg(long)]
    pub all_ops: bool,

    /// Only augment records of this class
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    Uniform,
    CostSensitive,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Model architecture [default: tiny_cnn]
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,

    #[arg(long, value_enum, default_value = "uniform")]
    pub weights: WeightsArg,

    /// Score sensitivity and selectivity on a probe set after every epoch
    #[arg(long)]
    pub track_behavior: bool,

    #[command(flatten)]
    pub train: TrainOverrides,

    #[command(flatten)]
    pub options: OptionOverrides,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Model architecture [default: tiny_cnn]
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,

    /// Comma-separated seeds; each gets its own run directory (overrides --seed)
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,

    /// Also run this mitigation: cost_sensitive, resample, augment or combined
    #[arg(long)]
    pub strategy: Option<String>,

    #[command(flatten)]
    pub train: TrainOverrides,

    #[command(flatten)]
    pub options: OptionOverrides,
}

#[derive(Debug, Args)]
pub struct MitigateArgs {
    /// Run directory written by `audit`
    #[arg(long)]
    pub from: PathBuf,

    /// cost_sensitive | resample | augment | combined [default: combined]
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct RecalibrateArgs {
    /// Run directory written by `audit`
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json to summarize
    #[arg(long)]
    pub report: PathBuf,

    /// Recompute the report from its embedded config and compare bytes
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeatmapKind {
    Attention,
    Relevance,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Model snapshot (tiny_vit)
    #[arg(long)]
    pub snapshot: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    /// sample_id of the record to explain
    #[arg(long)]
    pub sample: String,

    #[arg(long, value_enum, default_value = "attention")]
    pub kind: HeatmapKind,

    /// Attention layer [default: last]
    #[arg(long)]
    pub layer: Option<usize>,

    /// Attention head [default: mean over heads]
    #[arg(long)]
    pub head: Option<usize>,

    /// Pixels per patch in the PGM
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}
