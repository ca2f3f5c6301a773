use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cirm_core::datagen::Preset;
use cirm_core::evalharness::AblationKind;
use cirm_core::intervene::PolicyKind;
use cirm_core::models::ModelKind;
use cirm_core::realign::{InputMode, RealignerArch};

pub const SUBCOMMANDS: [&str; 9] = [
    "gen-world",
    "gen-data",
    "train",
    "train-realigner",
    "simulate",
    "benchmark",
    "ablate",
    "serve",
    "export",
];

#[derive(Debug, Parser)]
#[command(name = "cirm", version, about = "Concept models with realigned interventions")]
pub struct Cli {
    /// Output directory; every file a command writes goes here.
    #[arg(long, global = true, env = "CIRM_OUT_DIR", default_value = "cirm-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a world specification to world.json.
    GenWorld(GenWorldArgs),
    /// Sample train.csv, val.csv and test.csv from a world.
    GenData(GenDataArgs),
    /// Train a concept model and write model.json.
    Train(TrainArgs),
    /// Train a post-hoc realigner for a frozen model and write realigner.json.
    TrainRealigner(TrainRealignerArgs),
    /// Run one intervention trajectory and write trajectory.json.
    Simulate(SimulateArgs),
    /// Run a benchmark suite and write its report and AUC table.
    Benchmark(BenchmarkArgs),
    /// Run an ablation and write its rows and curves.
    Ablate(AblateArgs),
    /// Serve interactive intervention sessions over HTTP.
    Serve(ServeArgs),
    /// Rewrite the CSV files of a saved benchmark report.
    Export(ExportArgs),
}

/// Read a config file of flag values.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON object whose keys are flag names; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenWorldArgs {
    #[arg(long, default_value = "small")]
    pub preset: Preset,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Overrides the preset's emission noise.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Overrides every concept's flip rate.
    #[arg(long)]
    pub flip_rate: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    /// Defaults to world.json in the output directory.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_val: usize,
    #[arg(long, default_value_t = 300)]
    pub n_test: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long, default_value = "sequential_cbm")]
    pub kind: ModelKind,
    /// Defaults to world.json in the output directory.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Directory holding train.csv and val.csv; defaults to the output directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub embedding_width: Option<usize>,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainRealignerArgs {
    /// Defaults to model.json in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Supplies concept groups; defaults to world.json in the output directory if present.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = "feedforward")]
    pub arch: RealignerArch,
    #[arg(long, default_value = "original")]
    pub input_mode: InputMode,
    #[arg(long, default_value_t = 2)]
    pub hidden_layers: usize,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    /// Selection policy simulated during training.
    #[arg(long, default_value = "ucp")]
    pub policy: PolicyKind,
    /// Seed of a random policy.
    #[arg(long)]
    pub policy_seed: Option<u64>,
    #[arg(long)]
    pub train_horizon: Option<usize>,
    #[arg(long)]
    pub include_initial_step: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Realign after every intervention with this realigner.
    #[arg(long)]
    pub realigner: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Samples to draw from; defaults to test.csv in the output directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "ucp")]
    pub policy: PolicyKind,
    /// Seed of a random policy.
    #[arg(long)]
    pub policy_seed: Option<u64>,
    /// Number of interventions; defaults to every selection unit.
    #[arg(long = "T", visible_alias = "horizon")]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub sample_index: usize,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct SuiteFlags {
    #[arg(long, default_value = "small")]
    pub world: Preset,
    #[arg(long, default_value_t = 1)]
    pub world_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Train, validation and test sizes.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub realigner_epochs: Option<usize>,
    /// Interventions per test trajectory; defaults to every selection unit.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Retrain everything instead of reusing checkpoints under cache/.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    /// The four base model kinds.
    Table1,
    /// The four base model kinds plus the intervention-aware CEM.
    Full,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, default_value = "table1")]
    pub suite: Suite,
    #[command(flatten)]
    pub suite_flags: SuiteFlags,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long)]
    pub kind: AblationKind,
    #[arg(long, default_value = "sequential_cbm")]
    pub model: ModelKind,
    #[command(flatten)]
    pub suite_flags: SuiteFlags,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub realigner: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Samples selectable by index; defaults to test.csv in the output directory if present.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub id: String,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 3600)]
    pub ttl_secs: u64,
    /// Include ground-truth concepts and labels in session payloads.
    #[arg(long)]
    pub expose_truth: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ExportArgs {
    /// Defaults to benchmark.json in the output directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}
