use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use trim_core::allocation::{DEFAULT_OWL_LAMBDA, DEFAULT_OWL_M};
use trim_core::masking::{ComparisonGroup, DEFAULT_CUTOFF};
use trim_core::optimizer::DEFAULT_K_ITERS;
use trim_core::pipeline::{GradientLoss, DEFAULT_CALIB_SAMPLES};
use trim_core::scoring::{DEFAULT_GBLM_BLEND, DEFAULT_HESSIAN_DAMPING};
use trim_core::{DimMetric, LayerMetric, ScoreMetric, TrimError};

mod commands;
mod output;

/// `DEFAULT_LR_SCHEDULE` as typed on the command line.
const DEFAULT_LR_SCHEDULE_ARG: &str = "0.01,0.02,0.05,0.1,0.2,0.5";

#[derive(Debug, Parser)]
#[command(name = "trim", version, about = "Dimension-wise sparsity allocation for one-shot pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the bundled 2-layer demo model and a calibration set with targets.
    Demo(DemoArgs),
    /// Compute per-layer importance scores.
    Score(ScoreArgs),
    /// Distribute a global sparsity target across layers.
    Allocate(AllocateArgs),
    /// Prune a model layer by layer.
    Prune(PruneArgs),
    /// Dimension-level analyses of scores and pruning sensitivity.
    Diagnose(DiagnoseArgs),
    /// Compare a pruned run against its dense model on holdout samples.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct DemoArgs {
    /// Directory receiving model.tnsr, model.json and calib.tnsr
    #[arg(long)]
    out_dir: PathBuf,
    /// Seed for weights, samples and targets
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of calibration samples
    #[arg(long, default_value_t = DEFAULT_CALIB_SAMPLES)]
    samples: usize,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model container; its JSON sidecar must sit next to it
    #[arg(long)]
    model: PathBuf,
    /// Calibration container; synthetic Gaussian samples are drawn when omitted
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Seed for synthetic calibration samples
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of synthetic calibration samples
    #[arg(long, default_value_t = DEFAULT_CALIB_SAMPLES)]
    calib_samples: usize,
}

#[derive(Debug, Args)]
struct ScoreOpts {
    /// Importance score: magnitude, wanda, sparsegpt or gblm
    #[arg(long, default_value_t = ScoreMetric::Wanda)]
    metric: ScoreMetric,
    /// Hessian damping factor (sparsegpt)
    #[arg(long, default_value_t = DEFAULT_HESSIAN_DAMPING)]
    damping: f64,
    /// Weight of the gradient term (gblm)
    #[arg(long, default_value_t = DEFAULT_GBLM_BLEND)]
    gblm_alpha: f64,
    /// Loss differentiated for gblm: squared_error or absolute_error
    #[arg(long, default_value_t = GradientLoss::SquaredError)]
    gradient_loss: GradientLoss,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    score: ScoreOpts,
    /// Output container with one "<layer>.score" tensor per layer
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AllocMethod {
    Uniform,
    Owl,
    Import,
}

#[derive(Debug, Args)]
struct AllocateArgs {
    /// Allocation method
    #[arg(long, value_enum, default_value_t = AllocMethod::Uniform)]
    method: AllocMethod,
    /// Score container written by `score` (uniform, owl)
    #[arg(long, required_if_eq_any = [("method", "uniform"), ("method", "owl")])]
    scores: Option<PathBuf>,
    /// Global sparsity target T (uniform, owl)
    #[arg(long, required_if_eq_any = [("method", "uniform"), ("method", "owl")])]
    t: Option<f64>,
    /// Outlier multiple M
    #[arg(long, default_value_t = DEFAULT_OWL_M)]
    owl_m: f64,
    /// Maximum deviation λ of a layer from T
    #[arg(long, default_value_t = DEFAULT_OWL_LAMBDA)]
    owl_lambda: f64,
    /// Allocation file to validate and re-emit (import)
    #[arg(long, required_if_eq("method", "import"))]
    from: Option<PathBuf>,
    /// Per-row sparsity ceiling bounding OWL's deviation
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    /// Output allocation JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    score: ScoreOpts,
    /// Allocation JSON from `allocate`
    #[arg(long, conflicts_with = "t", required_unless_present = "t")]
    allocation: Option<PathBuf>,
    /// Uniform global sparsity target T
    #[arg(long)]
    t: Option<f64>,
    /// Iterations per learning rate
    #[arg(long, default_value_t = DEFAULT_K_ITERS)]
    k: usize,
    /// Increasing, comma-separated learning rates
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_LR_SCHEDULE_ARG)]
    lr_schedule: Vec<f64>,
    /// Per-row sparsity ceiling
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    /// Layer-level quality: cosim_flat, cosim_sample or neg_mse
    #[arg(long, default_value_t = LayerMetric::CosimFlat)]
    layer_metric: LayerMetric,
    /// Per-row quality: cosine, psnr or neg_mse
    #[arg(long, default_value_t = DimMetric::Cosine)]
    dim_metric: DimMetric,
    /// Evaluate each layer on inputs passed through the already-pruned layers
    #[arg(long)]
    recalc: bool,
    /// Uniform sparsity without dimension-wise adjustment
    #[arg(long)]
    no_trim: bool,
    /// Comparison group with --no-trim: per_output, whole_layer, input_block[:N]
    #[arg(long, default_value_t = ComparisonGroup::PerOutput, requires = "no_trim")]
    group: ComparisonGroup,
    /// JSON prune configuration replacing the score and optimizer flags
    #[arg(
        long,
        conflicts_with_all = [
            "metric", "damping", "gblm_alpha", "gradient_loss", "k", "lr_schedule", "cutoff",
            "layer_metric", "dim_metric", "recalc", "no_trim", "group",
        ]
    )]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Diagnostic {
    Gini,
    Curve,
    RemoveOne,
    OutlierStress,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Analysis to run
    #[arg(value_enum)]
    which: Diagnostic,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    score: ScoreOpts,
    /// Histogram bins over [0, 1] (gini)
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Sparsity grid start:stop:step, inclusive (curve)
    #[arg(long, default_value = "0:0.95:0.05")]
    grid: String,
    /// Per-row sparsity ceiling (curve)
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    /// min_norm, max_norm, random or random:<seed> (remove-one)
    #[arg(long, default_value = "max_norm")]
    strategy: String,
    /// Outlier multiple M (outlier-stress)
    #[arg(long, default_value_t = DEFAULT_OWL_M)]
    owl_m: f64,
    /// Fraction of rows pruned per layer (outlier-stress)
    #[arg(long, default_value_t = 0.1)]
    top_frac: f64,
    /// Sparsity applied to each selected row (outlier-stress)
    #[arg(long, default_value_t = 0.9)]
    row_sparsity: f64,
    /// Seed for holdout samples (remove-one, outlier-stress)
    #[arg(long, default_value_t = 1)]
    holdout_seed: u64,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory written by `prune`
    #[arg(long)]
    run: PathBuf,
    /// Seed for synthetic holdout samples; must differ from the calibration seed
    #[arg(long, default_value_t = 1)]
    holdout_seed: u64,
    /// Number of holdout samples
    #[arg(long, default_value_t = DEFAULT_CALIB_SAMPLES)]
    holdout_samples: usize,
    /// Holdout container used instead of synthetic samples
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Output JSON (defaults to <run>/eval.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invalid combination of arguments detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<TrimError>() {
        return match e {
            TrimError::Contract(_) => 2,
            TrimError::Shape(_) | TrimError::Format(_) | TrimError::Io(_) => 3,
            TrimError::Numerical(_) | TrimError::Budget(_) => 4,
        };
    }
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Demo(a) => commands::demo(a),
        Command::Score(a) => commands::score(a),
        Command::Allocate(a) => commands::allocate(a),
        Command::Prune(a) => commands::prune(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Eval(a) => commands::eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
