use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use srafte_core::Pde;

#[derive(Debug, Parser)]
#[command(name = "srafte", version, about = "Coarse-solver + learned-lift PDE surrogates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate paired coarse/fine trajectories.
    GenData(GenDataArgs),
    /// Train the lift (phase 1 or 2) or the autoregressive baseline.
    Train(TrainArgs),
    /// Roll a propagator forward over a dataset and score it.
    Forecast(ForecastArgs),
    /// Write the super-resolution and forecasting metric tables.
    Eval(EvalArgs),
    /// Merge metric tables into mean ± std summaries.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PdeArg {
    Heat,
    Wave,
    Ns,
}

impl From<PdeArg> for Pde {
    fn from(p: PdeArg) -> Pde {
        match p {
            PdeArg::Heat => Pde::Heat,
            PdeArg::Wave => Pde::Wave,
            PdeArg::Ns => Pde::Ns,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Ar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    /// Surrogate `lift ∘ coarse step ∘ decimate` with a trained lift.
    FnoSr,
    FnoAr,
    /// Coarse solve followed by bicubic interpolation.
    Bicubic,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory; defaults to a subdirectory of $SRAFTE_DATA_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub pde: PdeArg,
    #[arg(long, default_value_t = 64)]
    pub n_traj: usize,
    #[arg(long)]
    pub n_coarse: Option<usize>,
    #[arg(long)]
    pub n_fine: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// End of the stored window; one extra frame is stored past it.
    #[arg(long, default_value_t = 1.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Navier–Stokes only.
    #[arg(long, value_enum)]
    pub dealias: Option<OnOff>,
    /// Navier–Stokes only.
    #[arg(long)]
    pub substeps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub phase: PhaseArg,
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON training configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phase 1 checkpoint to fine-tune (phase 2).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Start phase 2 from random weights.
    #[arg(long)]
    pub ablate_no_pretrain: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct HorizonArgs {
    /// Number of steps from the start frame (t = 1).
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Forecast end time; the equation's default when neither is given.
    #[arg(long, conflicts_with = "horizon")]
    pub t_end: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub horizon: HorizonArgs,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Held-out trajectories.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoints to score, repeatable. Phase 1 lifts are scored on
    /// super-resolution, phase 2 lifts inside the surrogate forecast and
    /// autoregressive models as forecasts.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    pub horizon: HorizonArgs,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories holding `eval` output, repeatable.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}
