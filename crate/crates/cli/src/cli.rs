//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lntune::data::TaskKind;
use lntune::metrics::MetricKind;
use lntune::model::Head;

#[derive(Debug, Parser)]
#[command(name = "lntune", version, about = "Fisher-guided LayerNorm fine-tuning laboratory")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving artifacts and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Flat TOML file with run settings (seed, epochs, lr_grid, ...).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count the elements a selector or strategy makes trainable.
    CountParams(CountParams),
    /// Write a freshly initialized checkpoint.
    Init(Init),
    /// Estimate the empirical Fisher of a model on a task.
    Fisher(Fisher),
    /// Rank encoder components by normalized Fisher summed over tasks.
    RankComponents(RankComponents),
    /// Build a Fisher mask over candidate elements.
    Mask(Mask),
    /// Fine-tune over a learning-rate grid.
    Train(Train),
    /// Per-component drift between two checkpoints.
    Drift(Drift),
    /// Per-layer LayerNorm Fisher tables.
    Heatmap(Heatmap),
    /// Kruskal-Wallis test over value files.
    Kwtest(Kwtest),
    /// Train Fisher masks at several trainable fractions.
    SweepF(SweepF),
    /// Re-run a manifest and check that every artifact is reproduced.
    Replay(Replay),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CountParams(_) => "count-params",
            Command::Init(_) => "init",
            Command::Fisher(_) => "fisher",
            Command::RankComponents(_) => "rank-components",
            Command::Mask(_) => "mask",
            Command::Train(_) => "train",
            Command::Drift(_) => "drift",
            Command::Heatmap(_) => "heatmap",
            Command::Kwtest(_) => "kwtest",
            Command::SweepF(_) => "sweep-f",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyName {
    Full,
    Bitfit,
    Layernorm,
    Random,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskModeName {
    Task,
    Global,
    Cv,
}

#[derive(Debug, Args)]
pub struct CountParams {
    #[arg(long, default_value = "bert-large-cased")]
    pub preset: String,
    #[arg(long, default_value = "classification:2")]
    pub head: Head,
    /// Selector expression, e.g. `bias-all+head`.
    #[arg(long, conflicts_with = "strategy")]
    pub selector: Option<String>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyName>,
    /// Seed of the random strategy.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Init {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub head: Head,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "model.ckpt")]
    pub output: String,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    /// Task name recorded in artifacts.
    #[arg(long)]
    pub task: String,
    /// Input form; inferred from `synth://` sources when omitted.
    #[arg(long)]
    pub kind: Option<TaskKind>,
    #[arg(long)]
    pub metric: Option<MetricKind>,
    /// Number of classes of a classification task.
    #[arg(long)]
    pub labels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint to start from.
    #[arg(long)]
    pub model: String,
    /// Seed for a replacement head when the checkpoint's head does not fit the task.
    #[arg(long)]
    pub head_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Fisher {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// TSV file or `synth://` URI.
    #[arg(long)]
    pub data: String,
    /// Samples used, from the start of the data.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Elements whose Fisher values are computed.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RankComponents {
    #[arg(required = true)]
    pub fisher: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Mask {
    #[arg(long, value_enum)]
    pub mode: MaskModeName,
    /// Task whose Fisher map ranks the elements (task mode).
    #[arg(long)]
    pub task: Option<String>,
    /// Task left out of the ranking (cv mode).
    #[arg(long)]
    pub exclude: Option<String>,
    #[arg(short = 'f', long)]
    pub fraction: f64,
    #[arg(long, default_value = "output.LayerNorm")]
    pub candidates: String,
    #[arg(long, default_value = "mask.bin")]
    pub output: String,
    #[arg(required = true)]
    pub fisher: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Learning rates; the strategy's default grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lr: Vec<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Train {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub train: String,
    #[arg(long)]
    pub validation: String,
    #[arg(long, value_enum)]
    pub strategy: StrategyName,
    /// Mask file for the mask strategy.
    #[arg(long, required_if_eq("strategy", "mask"))]
    pub mask: Option<String>,
    /// Seed of the random strategy's draw; the run seed when omitted.
    #[arg(long)]
    pub random_seed: Option<u64>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct Drift {
    pub pre: String,
    pub fine: String,
}

#[derive(Debug, Args)]
pub struct Heatmap {
    #[arg(required = true)]
    pub fisher: Vec<String>,
    /// Also write `heatmap.svg`.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct Kwtest {
    /// Files of numbers separated by commas or newlines.
    #[arg(num_args = 2.., required = true)]
    pub groups: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SweepF {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub train: String,
    #[arg(long)]
    pub validation: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    )]
    pub fractions: Vec<f64>,
    #[arg(long, value_enum, default_value = "task")]
    pub mode: MaskModeName,
    /// Task left out of the ranking (cv mode).
    #[arg(long)]
    pub exclude: Option<String>,
    /// Fisher maps to rank by; estimated on the training data when omitted (task mode only).
    #[arg(long)]
    pub fisher: Vec<String>,
    #[arg(long, default_value = "output.LayerNorm")]
    pub candidates: String,
    /// Samples for a Fisher estimate.
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct Replay {
    pub manifest: PathBuf,
}
