//! Data handling and training: readings ingestion, chronological splits,
//! windows, normalization, Adam, metrics, the historical-average baseline,
//! checkpoints and a synthetic road-network generator.

mod baseline;
mod checkpoint;
mod dataset;
mod metrics;
mod normalizer;
mod optim;
mod readings;
mod split;
mod synth;
mod train;

pub use baseline::{ha_evaluate, HistoricalAverage, SlotKind};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{Batch, Dataset};
pub use metrics::{HorizonMetrics, Metrics, MetricsAccumulator, MetricsReport, MAPE_FLOOR};
pub use normalizer::Normalizer;
pub use optim::{Adam, AdamConfig};
pub use readings::{load_readings, parse_readings, ReadingsTable};
pub use split::{chronological_split, window_starts, SplitRatios, Splits};
pub use synth::{synth_generate, SynthData};
pub use train::{evaluate, normalized_mae, predict_windows, train, train_on, EpochLog, TrainConfig, TrainReport};

use crate::graph_views::GraphError;
use crate::numerics::NumericsError;
use crate::stformer::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// True for failures caused by numbers going bad rather than by inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. }
                | Self::Numerics(NumericsError::NonFinite(_))
                | Self::Model(ModelError::Numerics(NumericsError::NonFinite(_)))
                | Self::Graph(GraphError::Numerics(NumericsError::NonFinite(_)))
        )
    }
}
