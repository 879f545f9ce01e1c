use std::path::{Path, PathBuf};

use clap::Args;
use lvst_core::graph_views::ViewConfig;
use lvst_core::numerics::MaskMode;
use lvst_core::pipeline::{SplitRatios, TrainConfig};
use lvst_core::stformer::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every knob of every command. Keys match the kebab-case flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub readings: Option<PathBuf>,
    /// Preprocess artifacts; defaults to the output directory.
    pub masks_dir: Option<PathBuf>,
    /// Defaults to `<output-dir>/model.lvst`.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,

    pub local_threshold: f64,
    pub k_global: Option<usize>,
    pub k_pivotal: Option<usize>,
    /// Laplacian eigenvectors per node; defaults to `min(8, N−1)`.
    pub basis_k: Option<usize>,

    pub d: usize,
    pub layers: usize,
    pub spatial_heads: usize,
    pub temporal_heads: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub stcb: bool,
    pub t_in: usize,
    pub t_out: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let views = ViewConfig::default();
        let split = SplitRatios::default();
        Self {
            graph: None,
            readings: None,
            masks_dir: None,
            checkpoint: None,
            output_dir: PathBuf::from("lvst-out"),
            seed: train.seed,
            threads: None,
            local_threshold: views.local_threshold,
            k_global: views.k_global,
            k_pivotal: views.k_pivotal,
            basis_k: None,
            d: model.d,
            layers: model.layers,
            spatial_heads: model.spatial_heads,
            temporal_heads: model.temporal_heads,
            dropout: model.dropout,
            mask_mode: model.mask_mode,
            stcb: model.stcb,
            t_in: model.t_in,
            t_out: model.t_out,
            lr: train.lr,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            train_ratio: split.train,
            val_ratio: split.val,
            test_ratio: split.test,
        }
    }
}

/// Command-line overrides; each flag mirrors a [`RunConfig`] key.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML file with any subset of the run configuration keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Road graph file (`N`, `E i j [dist]`, `OD i j w` lines).
    #[arg(long, global = true)]
    pub graph: Option<PathBuf>,
    /// Readings CSV with a `# readings N= interval= start=` header.
    #[arg(long, global = true)]
    pub readings: Option<PathBuf>,
    /// Where preprocess artifacts live (default: the output directory).
    #[arg(long, global = true)]
    pub masks_dir: Option<PathBuf>,
    /// Model checkpoint (default: `<output-dir>/model.lvst`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for every file a command writes.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "LVST_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Shortest-path bound for the local view (hops without edge distances).
    #[arg(long, global = true)]
    pub local_threshold: Option<f64>,
    /// Mutual DTW neighbours per node for the global view (default ⌈N/20⌉).
    #[arg(long, global = true)]
    pub k_global: Option<usize>,
    /// Pivotal node count (default ⌈N/10⌉).
    #[arg(long, global = true)]
    pub k_pivotal: Option<usize>,
    /// Laplacian eigenvectors in the spatial embedding (default min(8, N−1)).
    #[arg(long, global = true)]
    pub basis_k: Option<usize>,
    /// Hidden width.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Encoder layers.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub spatial_heads: Option<usize>,
    #[arg(long, global = true)]
    pub temporal_heads: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    /// `exclude` (mask 0 removes the pair) or `multiply` (literal logit scaling).
    #[arg(long, global = true)]
    pub mask_mode: Option<MaskMode>,
    /// Apply spatio-temporal context broadcasting after each FFN.
    #[arg(long, global = true)]
    pub stcb: Option<bool>,
    /// Input steps per window.
    #[arg(long, global = true)]
    pub t_in: Option<usize>,
    /// Forecast steps per window.
    #[arg(long, global = true)]
    pub t_out: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long, global = true)]
    pub train_ratio: Option<f64>,
    #[arg(long, global = true)]
    pub val_ratio: Option<f64>,
    #[arg(long, global = true)]
    pub test_ratio: Option<f64>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident; $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

macro_rules! apply_opt {
    ($cfg:ident, $args:ident; $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = Some(v); })*
    };
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags (and `LVST_SEED`).
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        apply!(cfg, self; output_dir, seed, local_threshold, d, layers, spatial_heads, temporal_heads, dropout,
            mask_mode, stcb, t_in, t_out, lr, batch_size, max_epochs, patience, train_ratio, val_ratio, test_ratio);
        apply_opt!(cfg, self; graph, readings, masks_dir, checkpoint, threads, k_global, k_pivotal, basis_k);
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.masks_dir.clone().unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.lvst"))
    }

    pub fn graph_path(&self) -> Result<&Path, CliError> {
        self.graph.as_deref().ok_or_else(|| CliError::Config("no graph file given (--graph)".into()))
    }

    pub fn readings_path(&self) -> Result<&Path, CliError> {
        self.readings.as_deref().ok_or_else(|| CliError::Config("no readings file given (--readings)".into()))
    }

    pub fn views(&self, steps_per_day: usize) -> ViewConfig {
        ViewConfig {
            local_threshold: self.local_threshold,
            k_global: self.k_global,
            k_pivotal: self.k_pivotal,
            steps_per_day,
        }
    }

    pub fn basis_k_for(&self, n: usize) -> usize {
        self.basis_k.unwrap_or_else(|| 8.min(n.saturating_sub(1)))
    }

    pub fn split(&self) -> SplitRatios {
        SplitRatios { train: self.train_ratio, val: self.val_ratio, test: self.test_ratio }
    }

    pub fn model(&self, n_nodes: usize, k: usize, steps_per_day: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            d: self.d,
            k,
            t_in: self.t_in,
            t_out: self.t_out,
            steps_per_day,
            layers: self.layers,
            spatial_heads: self.spatial_heads,
            temporal_heads: self.temporal_heads,
            dropout: self.dropout,
            mask_mode: self.mask_mode,
            stcb: self.stcb,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.output_dir)?;
        std::fs::write(self.output_dir.join("resolved_config.toml"), self.to_toml())?;
        Ok(())
    }
}
