use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use committee::{AggregationMode, CellSize, ConfidenceMetric, OrderPolicy, ThresholdTarget};
use serde::Serialize;

/// Evaluate ensembles and confidence-gated cascades over saved model
/// predictions, and search thresholds and model combinations under cost or
/// accuracy targets.
///
/// Exit status: 0 on success, 1 on invalid input, 2 when a target cannot be met.
#[derive(Debug, Parser, Serialize)]
#[command(name = "committee", version)]
pub struct Cli {
    /// Worker threads for search subcommands; 0 uses every core.
    #[arg(long, global = true, env = "COMMITTEE_JOBS", default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Load a pool manifest and print what it contains.
    Validate(ValidateArgs),
    /// Split a pool into threshold-selection and evaluation pools.
    Split(SplitCmdArgs),
    /// Write a synthetic pool with controlled accuracies and costs.
    Synth(SynthArgs),
    /// Evaluate one cascade or ensemble.
    Evaluate(EvaluateArgs),
    /// Accuracy and cost while one stage's threshold runs over its grid.
    Sweep(SweepArgs),
    /// Best thresholds for a fixed model sequence.
    SearchThresholds(SearchArgs),
    /// Best model combination and thresholds.
    Select(SelectArgs),
    /// Cost/accuracy frontier over model combinations and grid points.
    Pareto(ParetoArgs),
    /// Accuracy on the most confident k% of examples.
    SelectiveAccuracy(SelectiveArgs),
    /// Evaluate a dense (per-pixel) cascade.
    DenseEvaluate(DenseEvaluateArgs),
    /// Best thresholds for a dense cascade.
    DenseSearch(DenseSearchArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PoolArgs {
    /// Pool manifest, or the directory holding `pool.json`.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OutArgs {
    /// Directory for report files. Without it the JSON report goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoringArgs {
    /// max_prob, logit_gap, prob_gap or neg_entropy.
    #[arg(long, default_value = "max_prob")]
    pub metric: ConfidenceMetric,
    /// mean_logits or mean_probs.
    #[arg(long, default_value = "mean_logits")]
    pub aggregation: AggregationMode,
}

#[derive(Debug, Args, Serialize)]
pub struct HoldoutArgs {
    /// Search on this fraction of the examples and also report the rest.
    #[arg(long)]
    pub split: Option<f64>,
    /// Seed of the split shuffle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct TargetArgs {
    /// Maximize accuracy with average cost at most this value.
    #[arg(long, value_name = "COST")]
    pub target_flops: Option<f64>,
    /// Minimize average cost with accuracy at least this value.
    #[arg(long, value_name = "ACCURACY")]
    pub target_accuracy: Option<f64>,
    /// Minimize average cost with accuracy within EPS of the ensemble.
    #[arg(long, value_name = "EPS", num_args = 0..=1, default_missing_value = "0.001")]
    pub match_ensemble: Option<f64>,
}

impl TargetArgs {
    pub fn target(&self) -> ThresholdTarget {
        match (self.target_flops, self.target_accuracy, self.match_ensemble) {
            (Some(b), _, _) => ThresholdTarget::CostBudget(b),
            (_, Some(g), _) => ThresholdTarget::AccuracyFloor(g),
            (_, _, Some(e)) => ThresholdTarget::MatchEnsemble(e),
            _ => unreachable!("clap requires one target"),
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct ObjectiveArgs {
    /// Maximize accuracy with average cost at most this value.
    #[arg(long, value_name = "COST")]
    pub target_flops: Option<f64>,
    /// Minimize average cost with accuracy at least this value.
    #[arg(long, value_name = "ACCURACY")]
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SpecArgs {
    /// Comma-separated model ids in cascade order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<String>,
    /// Comma-separated exit thresholds, one per model but the last.
    #[arg(long, allow_hyphen_values = true)]
    pub thresholds: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Treat the manifest as a dense (per-pixel) pool.
    #[arg(long)]
    pub dense: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitCmdArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Fraction of examples in the threshold-selection part.
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory of the two output pools.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Directory to write the pool into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub examples: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Comma-separated target accuracy of each model.
    #[arg(long, value_delimiter = ',')]
    pub accuracies: Vec<f64>,
    /// Comma-separated cost of each model.
    #[arg(long, value_delimiter = ',', required = true)]
    pub costs: Vec<f64>,
    /// How much the models agree on which examples are hard, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub correlation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated model types; repeated types become replicates.
    #[arg(long, value_delimiter = ',')]
    pub types: Option<Vec<String>>,
    /// Write a two-model dense pool instead (uses --classes, --costs, --seed).
    #[arg(long)]
    pub dense: bool,
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub spec: SpecArgs,
    /// Run every model and average (ignores --thresholds).
    #[arg(long)]
    pub ensemble: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    /// Write a per-example trace CSV here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Comma-separated model ids in cascade order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<String>,
    /// 1-based stage whose threshold is swept.
    #[arg(long, default_value_t = 1)]
    pub stage: usize,
    /// Thresholds of the other stages (default: never exit there).
    #[arg(long, value_delimiter = ',')]
    pub fixed: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub grid_resolution: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Comma-separated model ids in cascade order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetArgs,
    #[arg(long, default_value_t = 100)]
    pub grid_resolution: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub holdout: HoldoutArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub objective: ObjectiveArgs,
    /// Upper bound on the summed cost of the chosen models.
    #[arg(long, value_name = "COST")]
    pub worst_case: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub max_models: usize,
    /// all_orders or non_decreasing_cost.
    #[arg(long, default_value = "all_orders")]
    pub order_policy: OrderPolicy,
    #[arg(long, default_value_t = 100)]
    pub grid_resolution: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub holdout: HoldoutArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ParetoArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    #[arg(long, value_name = "COST")]
    pub worst_case: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub max_models: usize,
    #[arg(long, default_value = "all_orders")]
    pub order_policy: OrderPolicy,
    /// Every grid point of every candidate is evaluated, so keep this small.
    #[arg(long, default_value_t = 10)]
    pub grid_resolution: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub holdout: HoldoutArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectiveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Model to score.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "max_prob")]
    pub metric: ConfidenceMetric,
    /// Comma-separated percentages of examples kept.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "10,20,30,40,50,60,70,80,90,100"
    )]
    pub ks: Vec<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DenseArgs {
    /// `full` for one decision per image, or the side length of square cells.
    #[arg(long, default_value = "full")]
    pub cell: CellSize,
    /// Pixels at or below this max-probability are left out of confidences.
    #[arg(long, default_value_t = committee::dense::DEFAULT_T_UNLAB)]
    pub t_unlab: f64,
    #[arg(long, default_value = "mean_logits")]
    pub aggregation: AggregationMode,
}

#[derive(Debug, Args, Serialize)]
pub struct DenseEvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub dense: DenseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DenseSearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pool: PoolArgs,
    /// Comma-separated model ids in cascade order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub target: TargetArgs,
    #[arg(long, default_value_t = 20)]
    pub grid_resolution: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub dense: DenseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}
