//! Argument parsing and command dispatch behind the `dtm` binary.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "dtm",
    version,
    about = "Disperse data, train sub-models, merge them into one"
)]
pub struct Cli {
    /// Seed applied to every seeded component (overrides the config file)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Pipeline config (JSON); sections not given fall back to defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, default_value = "dtm-out")]
    pub out: PathBuf,

    /// Suppress the summary printed to stdout
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Split a JSONL corpus into K clusters
    Disperse(DisperseArgs),
    /// Generate the synthetic biased dataset
    Synth(SynthArgs),
    /// Train a classifier on a labeled corpus
    Train(TrainArgs),
    /// Estimate the diagonal Fisher information of a model
    Fisher(FisherArgs),
    /// Merge checkpoints
    Merge(MergeArgs),
    /// Evaluate a model on a labeled corpus
    Eval(EvalArgs),
    /// Evaluate the logit-averaging ensemble of several models
    Ensemble(EnsembleArgs),
    /// Diagnostics over loss traces and evaluation reports
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run the complete experiment
    Run(RunArgs),
    /// Run the experiment once per K
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Random,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MergeArg {
    Average,
    Fisher,
    TaskVector,
    Ties,
    Dare,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Dtm,
    Vanilla,
    UniformSoup,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Linear,
    Mlp,
}

#[derive(Args)]
pub struct DisperseArgs {
    /// Input corpus (JSONL)
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub signal_dim: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub bias_strength: Option<f64>,
    #[arg(long)]
    pub samples_per_cluster: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

/// Training hyper-parameters shared by `train`, `run` and `sweep`.
#[derive(Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Use momentum SGD with this coefficient
    #[arg(long)]
    pub momentum: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training corpus with features and labels
    #[arg(long)]
    pub data: PathBuf,
    /// Validation corpus for the loss trace (defaults to the training corpus)
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    /// Hidden width for the MLP layout
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Number of classes (defaults to the config's bias section)
    #[arg(long)]
    pub classes: Option<usize>,
    /// Train on sequential random portions and record losses after each
    #[arg(long)]
    pub pilot: bool,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Checkpoint path (default: <out>/model.ct)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct FisherArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Checkpoint path (default: <out>/fisher.ct)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct MergeArgs {
    /// Fine-tuned checkpoints to merge
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MergeArg>,
    /// Base checkpoint (task_vector, ties, dare)
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Fisher checkpoints, one per model (fisher)
    #[arg(long, num_args = 1..)]
    pub fishers: Vec<PathBuf>,
    /// Merge recipe JSON; flags override its fields
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    /// Comma-separated averaging weights
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Checkpoint path (default: <out>/merged.ct)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path (default: <out>/eval.json)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path (default: <out>/ensemble.json)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Train/val loss-reduction ratio between consecutive checkpoints
    LossRatio {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Spearman correlation of per-class train and val loss reductions
    Spearman {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1)]
        from: usize,
        #[arg(long, default_value_t = 2)]
        to: usize,
    },
    /// Classes whose train-loss reduction most exceeds their val-loss reduction
    BiasTop {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Start checkpoint (default: first)
        #[arg(long)]
        from: Option<usize>,
        /// End checkpoint (default: last)
        #[arg(long)]
        to: Option<usize>,
    },
    /// Venn fractions of sub-model error sets, plus bucket accuracy of a fused model
    ErrorSets {
        /// Evaluation reports of the sub-models
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Evaluation report of the fused model
        #[arg(long)]
        fused: Option<PathBuf>,
    },
}

/// Pipeline overrides shared by `run` and `sweep`.
#[derive(Args)]
pub struct PipelineFlags {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long, value_enum)]
    pub merge: Option<MergeArg>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long)]
    pub bias_strength: Option<f64>,
    #[arg(long)]
    pub samples_per_cluster: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    /// Skip the sequential-portion study
    #[arg(long)]
    pub no_pilot: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Comma-separated K values (default: the config's sweep list, else 2,3,4,5,6)
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

/// Parses `args` (program name first) and runs the command. Errors are
/// printed to stderr with their full context chain.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
