//! Road graph, shortest paths, DTW, the three spatial views and the Laplacian basis.

mod dtw;
mod graph;
mod laplacian;
mod masks;
mod paths;

pub use dtw::{dtw_distance, dtw_matrix};
pub use graph::{permute_matrix, Edge, RoadGraph};
pub use laplacian::{laplacian_basis, normalized_laplacian, LaplacianBasis, TRIVIAL_EIGENVALUE};
pub use masks::{
    build_global_mask, build_local_mask, build_pivotal_mask, daily_average, mask_to_csv,
    mutual_top_k, node_scores, parse_mask_csv, read_mask_csv, top_k_nearest, top_k_scores,
    write_mask_csv,
};
pub use paths::{shortest_paths, DistanceMatrix};

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// View-construction knobs. `None` counts resolve from the node count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    /// Strict upper bound on shortest-path length (hops when the graph has no distances).
    pub local_threshold: f64,
    /// Defaults to ⌈N/20⌉.
    pub k_global: Option<usize>,
    /// Defaults to ⌈N/10⌉.
    pub k_pivotal: Option<usize>,
    pub steps_per_day: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { local_threshold: 3.0, k_global: None, k_pivotal: None, steps_per_day: 288 }
    }
}

impl ViewConfig {
    pub fn k_global_for(&self, n: usize) -> usize {
        self.k_global.unwrap_or_else(|| n.div_ceil(20))
    }

    pub fn k_pivotal_for(&self, n: usize) -> usize {
        self.k_pivotal.unwrap_or_else(|| n.div_ceil(10))
    }

    pub fn validate(&self, n: usize) -> Result<(), GraphError> {
        let (kg, kp) = (self.k_global_for(n), self.k_pivotal_for(n));
        if !(self.local_threshold > 0.0) {
            return Err(GraphError::Config(format!("local_threshold must be positive, got {}", self.local_threshold)));
        }
        if kg == 0 || kg >= n {
            return Err(GraphError::Config(format!("k_global must satisfy 0 < k_global < N (k_global={kg}, N={n})")));
        }
        if kp == 0 || kp > n {
            return Err(GraphError::Config(format!("k_pivotal must satisfy 0 < k_pivotal ≤ N (k_pivotal={kp}, N={n})")));
        }
        if self.steps_per_day == 0 {
            return Err(GraphError::Config("steps_per_day must be positive".into()));
        }
        Ok(())
    }
}

/// The three `N×N` spatial masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMasks {
    pub local: Tensor,
    pub global: Tensor,
    /// Raw `Score(i)+Score(j)` weights; rescaled by the attention layer before use.
    pub pivotal: Tensor,
}

impl ViewMasks {
    pub fn n_nodes(&self) -> usize {
        self.local.shape()[0]
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            local: permute_matrix(&self.local, perm),
            global: permute_matrix(&self.global, perm),
            pivotal: permute_matrix(&self.pivotal, perm),
        }
    }
}

/// Builds all three views. `train_history` is `N × T_train` and must come from the training split only.
pub fn build_views(g: &RoadGraph, train_history: &Tensor, cfg: &ViewConfig) -> Result<ViewMasks, GraphError> {
    let n = g.n_nodes();
    cfg.validate(n)?;
    if train_history.shape()[0] != n {
        return Err(GraphError::Input(format!(
            "history has {} nodes, graph has {n}",
            train_history.shape()[0]
        )));
    }
    let local = build_local_mask(&shortest_paths(g)?, cfg.local_threshold)?;
    let avg = daily_average(train_history, cfg.steps_per_day)?;
    let global = build_global_mask(&avg, cfg.k_global_for(n))?;
    // Sensor-only data has no OD records; adjacency stands in (degree-based pivotality).
    let od = g.od_matrix().cloned().unwrap_or_else(|| g.adjacency());
    let pivotal = build_pivotal_mask(&node_scores(&od)?, cfg.k_pivotal_for(n))?;
    Ok(ViewMasks { local, global, pivotal })
}
