use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mdmask", version, about = "Multi-domain networks from binary masks over a frozen backbone")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file whose keys override the command-line flags of the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural dataset or a whole stock suite.
    GenData(GenDataArgs),
    /// Train a backbone and classifier (or finetune a checkpoint) and write an MDBB checkpoint.
    Pretrain(PretrainArgs),
    /// Train masks for a new domain on a frozen backbone and write an MDMK delta.
    AddDomain(AddDomainArgs),
    /// Evaluate a backbone checkpoint or a domain delta on a dataset.
    Eval(EvalArgs),
    /// Decathlon-style score of a set of domains against baseline errors.
    Score(ScoreArgs),
    /// Per-layer mask density and scalar values of a delta.
    Inspect(InspectArgs),
}

/// Where a dataset comes from: a directory or a generated suite member.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory holding train.mdld and test.mdld.
    #[arg(long, value_name = "DIR", conflicts_with = "suite")]
    pub data: Option<PathBuf>,
    /// Stock suite to generate the dataset from (mds-3, mds-5).
    #[arg(long, requires = "domain")]
    pub suite: Option<String>,
    /// Domain of the suite; `base` selects the pretraining domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// Multiplier on the suite's split sizes.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Schedule preset: desk (30/20), bench1 (15/10) or decathlon (60/45).
    #[arg(long, default_value = "desk")]
    pub schedule: String,
    /// Override the preset's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the preset's decay epoch.
    #[arg(long)]
    pub decay_epoch: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Random horizontal flips of training images.
    #[arg(long)]
    pub flip: bool,
    /// Seed of shuffling and initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Family: blobs, bars, digits-lite, inverted-<family>, rotated-<family>.
    #[arg(long, conflicts_with = "suite", required_unless_present = "suite")]
    pub family: Option<String>,
    /// Generate every domain of a stock suite into subdirectories.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 640)]
    pub train_size: usize,
    #[arg(long, default_value_t = 320)]
    pub test_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of pixel noise.
    #[arg(long, default_value_t = 0.15)]
    pub noise: f32,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f32,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Architecture preset (smallnet, tinynet) or architecture file.
    #[arg(long, default_value = "smallnet")]
    pub arch: String,
    /// Start from this checkpoint's backbone with a fresh classifier (finetuning).
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AddDomainArgs {
    /// Backbone checkpoint (MDBB).
    #[arg(long, value_name = "FILE")]
    pub backbone: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Domain identifier stored in the delta (defaults to the dataset name).
    #[arg(long)]
    pub id: Option<String>,
    /// full, simple, piggyback, full-no-bias, full-no-k2, simple-no-bias or custom:...
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// identity or sigmoid.
    #[arg(long, default_value = "identity")]
    pub surrogate: String,
    /// layer or channel.
    #[arg(long, default_value = "layer")]
    pub granularity: String,
    /// masks or classifier-only.
    #[arg(long, default_value = "masks")]
    pub protocol: String,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub adam_lr: f32,
    #[arg(long, default_value_t = 1e-3)]
    pub sgd_lr: f32,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Also write the real-valued masks (MDRM) for resuming training.
    #[arg(long, value_name = "FILE")]
    pub resume_out: Option<PathBuf>,
    /// Continue from an existing delta plus its MDRM file instead of a fresh domain.
    #[arg(long, value_names = ["DELTA", "MDRM"], num_args = 2)]
    pub resume: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub backbone: PathBuf,
    /// Domain delta; without it the checkpoint's own classifier is evaluated.
    #[arg(long, value_name = "FILE")]
    pub delta: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// TSV with columns `domain` and `e_max`.
    #[arg(long, value_name = "FILE")]
    pub baselines: PathBuf,
    /// Treat the baseline column as finetuning errors and double them (capped at 1).
    #[arg(long)]
    pub calibrate: bool,
    /// TSV with columns `domain` and `error`, instead of evaluating deltas.
    #[arg(long, value_name = "FILE")]
    pub errors: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub backbone: Option<PathBuf>,
    /// Directory holding one dataset directory per domain id.
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Domain deltas (MDMK).
    pub deltas: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Domain delta (MDMK).
    pub delta: PathBuf,
}
