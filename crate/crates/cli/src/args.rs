use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mia_core::orchestrator::Backend;

#[derive(Debug, Parser)]
#[command(
    name = "mia",
    version,
    about = "Discover and evaluate logits-level membership inference strategies"
)]
pub struct Cli {
    /// JSON config file with optional `run`, `simulation` and `holdout` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Run the loop without the guidance step.
    #[arg(long, global = true)]
    pub no_guidance: bool,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Llm,
    Replay,
    Offline,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Llm => Backend::LlmChat,
            BackendArg::Replay => Backend::Replay,
            BackendArg::Offline => Backend::OfflineMutation,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic member/non-member container.
    Simulate(SimulateArgs),
    /// Evaluate every baseline metric on a container.
    EvalBaselines(DataArgs),
    /// Run the discovery loop.
    RunLoop(RunLoopArgs),
    /// Re-evaluate top library strategies on a validation/holdout split.
    HoldoutEval(HoldoutArgs),
    /// Render a library as markdown.
    ExportReport(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub nonmembers: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Fixed boost; skips calibration.
    #[arg(long, conflicts_with = "target_auc")]
    pub delta: Option<f64>,
    /// Calibrate the boost so the gap metric reaches this AUC.
    #[arg(long)]
    pub target_auc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Logits container.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunLoopArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Existing library to continue from.
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Fixture directory for the replay backend.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HoldoutArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub library: PathBuf,
    /// Share of each class that goes to validation.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub library: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}
