use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Federated training, data-free distillation and distributed-inference
/// simulation on desk-scale models.
///
/// Human-written configs are TOML; every artifact is JSON (plus CSV for
/// tables). Each command that writes to `--out` first writes
/// `manifest.json` with the config hash, seed and versions. The environment
/// variable EDGEFLOW_SEED overrides the config's `seed`; `--seed` overrides
/// both.
///
/// Exit status: 0 on success, 1 on a usage or config error, 2 when the run
/// itself fails.
#[derive(Debug, Parser)]
#[command(name = "edgeflow", version, propagate_version = true)]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    /// Run seed; beats EDGEFLOW_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print parameter and FLOP counts of a model spec.
    Count(CountArgs),
    /// Print a ready-made model spec as JSON.
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Supervised training of one model.
    Train(RunArgs),
    /// Federated training (FedAvg or FedMAX) with a per-round byte ledger.
    Fed(RunArgs),
    /// Data-free distillation from teacher activation metadata.
    #[command(subcommand)]
    Dream(DreamCommand),
    /// Community-partitioned student ensembles.
    #[command(subcommand)]
    Nonn(NonnCommand),
    /// Write a fully connected topology of calibrated edge devices.
    Topology(TopologyArgs),
    /// Simulate one inference of a placement on a topology.
    Sim(SimArgs),
    /// Pairwise speedup table over simulation reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Model spec JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Batch size the FLOP count is taken over.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Also print one line per layer.
    #[arg(long)]
    pub per_layer: bool,
    /// Write `counts.json` (and a manifest) here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ZooCommand {
    /// Wide residual network for 3x32x32 inputs.
    Wrn {
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        widen: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Multilayer perceptron.
    Mlp {
        #[arg(long)]
        inputs: usize,
        /// Comma-separated hidden widths.
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long)]
        classes: usize,
    },
    /// Convolutions, global average pool, dense classifier.
    Cnn {
        /// Input shape `C,H,W`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        input: Vec<usize>,
        /// Comma-separated channel counts.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 1)]
        padding: usize,
        #[arg(long)]
        classes: usize,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DreamCommand {
    /// Per-class activation clusters and principal components of a teacher.
    Extract {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher model sidecar JSON.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Synthesize inputs whose activations match noisy cluster centroids.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Metadata JSON from `dream extract`.
        #[arg(long)]
        metadata: PathBuf,
    },
    /// Train a student on the teacher's soft labels over synthetic inputs.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Dream batch sidecar JSON from `dream generate`.
        #[arg(long)]
        dreams: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum NonnCommand {
    /// Filter activation network of the teacher's final convolution.
    Graph {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Louvain communities grouped into budgeted students.
    Partition {
        #[command(flatten)]
        run: RunArgs,
        /// Filter graph JSON from `nonn graph`.
        #[arg(long)]
        graph: PathBuf,
        /// Teacher model sidecar JSON; supplies the input shape.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train the students and the fusion layer.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Ensemble spec JSON from `nonn partition`.
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Fused predictions of a trained ensemble on the test split.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Directory written by `nonn train`.
        #[arg(long)]
        ensemble_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkPreset {
    /// 100 Mbit/s, 1 ms per message.
    Wired,
    /// Infinite bandwidth, no latency.
    Ideal,
}

#[derive(Debug, Args)]
pub struct TopologyArgs {
    #[arg(long)]
    pub devices: usize,
    /// Model whose FLOPs take the measured teacher latency on one device.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Memory per device in bytes.
    #[arg(long, default_value_t = 1_000_000_000)]
    pub memory: u64,
    #[arg(long, value_enum, default_value_t = LinkPreset::Wired)]
    pub link: LinkPreset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("plan").required(true).args(["placement", "ensemble", "model"]))]
pub struct SimArgs {
    /// Topology JSON.
    #[arg(long)]
    pub topology: PathBuf,
    /// Placement JSON.
    #[arg(long)]
    pub placement: Option<PathBuf>,
    /// Plan an ensemble placement from this ensemble spec instead.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Plan a channel-split placement of this model spec instead.
    #[arg(long, requires = "shards")]
    pub model: Option<PathBuf>,
    /// Devices a split model is spread over.
    #[arg(long)]
    pub shards: Option<usize>,
    /// Stored bytes per parameter when planning.
    #[arg(long, default_value_t = 1)]
    pub bytes_per_param: u64,
    /// Transferred bytes per activation value when planning.
    #[arg(long, default_value_t = 4)]
    pub bytes_per_value: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// `NAME=REPORT.json`; a bare path is named after itself. The first
    /// report is the usual baseline.
    #[arg(long = "report")]
    pub reports: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    /// Space-separated subcommand path, e.g. `nonn train`.
    pub fn name(&self) -> &'static str {
        match self {
            Command::Count(_) => "count",
            Command::Zoo(_) => "zoo",
            Command::Train(_) => "train",
            Command::Fed(_) => "fed",
            Command::Dream(DreamCommand::Extract { .. }) => "dream extract",
            Command::Dream(DreamCommand::Generate { .. }) => "dream generate",
            Command::Dream(DreamCommand::Distill { .. }) => "dream distill",
            Command::Nonn(NonnCommand::Graph { .. }) => "nonn graph",
            Command::Nonn(NonnCommand::Partition { .. }) => "nonn partition",
            Command::Nonn(NonnCommand::Train { .. }) => "nonn train",
            Command::Nonn(NonnCommand::Infer { .. }) => "nonn infer",
            Command::Topology(_) => "topology",
            Command::Sim(_) => "sim",
            Command::Compare(_) => "compare",
        }
    }
}
