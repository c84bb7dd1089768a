use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use era_core::data::Split;
use era_core::model::Variant;

#[derive(Debug, Parser)]
#[command(name = "era", version, about = "Train and evaluate ERA networks on the synthetic early-prediction task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or resume) a run and write its log and checkpoints.
    Train(TrainArgs),
    /// Accuracy at every observation ratio, AUC and selection histograms.
    Eval(EvalArgs),
    /// Finite-difference suites on tiny shapes.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one row per setting of an axis.
    Ablate(AblateArgs),
    /// Write the generated dataset as an ERA1 container.
    ExportData(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to every missing field.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (initialisation, batches, selection noise).
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Overrides the replaced-layer variant.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory (overrides `output_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Resume from this checkpoint instead of `<out>/checkpoint.erac`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Accept a checkpoint whose architecture hash differs.
    #[arg(long)]
    pub force: bool,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Defaults to `<output_dir>/checkpoint.erac`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// ERA1 dataset; generated from the config when absent.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Directory for `eval.json` (defaults to `output_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Number of consecutive seeds, starting at the run seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Multiplies analytic gradients before comparison (fault injection).
    #[arg(long, hide = true)]
    pub sabotage: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "expert_ratio", alias = "expert-ratio")]
    ExpertRatio,
    #[value(name = "bank_size", alias = "bank-size")]
    BankSize,
    #[value(name = "replacement_fraction", alias = "replacement-fraction")]
    ReplacementFraction,
    #[value(name = "gamma_s", alias = "gamma-s")]
    GammaS,
    #[value(name = "variant")]
    Variant,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::ExpertRatio => "expert_ratio",
            Axis::BankSize => "bank_size",
            Axis::ReplacementFraction => "replacement_fraction",
            Axis::GammaS => "gamma_s",
            Axis::Variant => "variant",
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Directory for `ablate_<axis>.json` (defaults to `output_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides `train.iterations` for every cell.
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory that receives `dataset.era1`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
