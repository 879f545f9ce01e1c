//! The `lvst` command line: preprocessing, training, evaluation, prediction,
//! gradient checking and synthetic data.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lvst_core::graph_views::GraphError;
use lvst_core::numerics::{NumericsError, OpKind};
use lvst_core::pipeline::PipelineError;
use lvst_core::stformer::ModelError;

pub use commands::SplitName;
pub use config::{ConfigArgs, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::GradcheckFailed(_) => 1,
            Self::Input(_) | Self::Config(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_numeric() {
            return Self::Numeric(e.to_string());
        }
        match e {
            PipelineError::Config(_) | PipelineError::Graph(GraphError::Config(_)) | PipelineError::Model(ModelError::Config(_)) => {
                Self::Config(e.to_string())
            }
            other => Self::Input(other.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Input(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "lvst", version, about = "Multi-view spatio-temporal transformer for traffic forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the three spatial masks, Laplacian basis and normalizer from graph + readings.
    Preprocess,
    /// Train on preprocessed data and write a checkpoint.
    Train,
    /// Score a checkpoint (and the historical-average baseline) on one split.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Forecast chosen windows; optionally dump spatial attention maps.
    Predict {
        /// Window start steps (default: first test window).
        #[arg(long = "window")]
        windows: Vec<usize>,
        #[arg(long)]
        dump_attention: bool,
    },
    /// Compare backward gradients with finite differences on a tiny model.
    Gradcheck {
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<OpKind>,
    },
    /// Generate a synthetic road graph and readings.
    Synth {
        #[arg(long, default_value_t = 10)]
        nodes: usize,
        #[arg(long, default_value_t = 20)]
        days: usize,
    },
}

/// Runs a parsed command line, writing progress to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let cfg = cli.config.resolve()?;
    if let Some(n) = cfg.threads {
        // A pool can only be installed once per process; later calls keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    if !matches!(cli.command, Command::Gradcheck { .. }) {
        cfg.echo()?;
    }
    match &cli.command {
        Command::Preprocess => commands::preprocess(&cfg, out),
        Command::Train => commands::train_cmd(&cfg, out),
        Command::Evaluate { split } => commands::evaluate_cmd(&cfg, *split, out).map(drop),
        Command::Predict { windows, dump_attention } => commands::predict_cmd(&cfg, windows, *dump_attention, out),
        Command::Gradcheck { inject_fault } => commands::gradcheck_cmd(cfg.seed, *inject_fault, out),
        Command::Synth { nodes, days } => commands::synth_cmd(&cfg, *nodes, *days, out),
    }
}

/// Output paths used by the commands, relative to a resolved configuration.
pub fn artifact_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    let dir = cfg.masks_dir();
    let mut v: Vec<PathBuf> = commands::MASK_FILES.iter().map(|(_, f)| dir.join(f)).collect();
    v.push(dir.join(commands::BASIS_FILE));
    v.push(dir.join(commands::NORMALIZER_FILE));
    v
}
