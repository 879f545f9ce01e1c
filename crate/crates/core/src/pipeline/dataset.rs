use super::{chronological_split, window_starts, Normalizer, PipelineError, ReadingsTable, SplitRatios, Splits};
use crate::embedding::CalendarIndex;
use crate::graph_views::{build_views, laplacian_basis, RoadGraph, ViewConfig};
use crate::numerics::Tensor;
use crate::stformer::{ModelInput, SpatialMasks};

/// Everything training and evaluation need, precomputed once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub table: ReadingsTable,
    pub normalizer: Normalizer,
    pub splits: Splits,
    pub masks: SpatialMasks,
    /// `[N, k]` Laplacian eigenvectors.
    pub basis: Tensor,
    pub t_in: usize,
    pub t_out: usize,
    /// Normalized values, step-major `[T_total, N]`.
    norm: Vec<f64>,
    calendar: Vec<CalendarIndex>,
}

/// A group of windows ready for the model.
#[derive(Clone, Debug)]
pub struct Batch {
    pub starts: Vec<usize>,
    pub input: ModelInput,
    /// `[B, T′, N]`, normalized.
    pub target: Tensor,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        table: ReadingsTable,
        splits: Splits,
        normalizer: Normalizer,
        masks: SpatialMasks,
        basis: Tensor,
        t_in: usize,
        t_out: usize,
    ) -> Result<Self, PipelineError> {
        let n = table.n_nodes();
        if masks.n_nodes() != n || basis.shape()[0] != n {
            return Err(PipelineError::Input(format!(
                "masks ({} nodes) or basis ({} rows) do not match readings ({n} nodes)",
                masks.n_nodes(),
                basis.shape()[0]
            )));
        }
        if splits.test.end != table.n_steps() {
            return Err(PipelineError::Input("splits do not cover the readings".into()));
        }
        let t = table.n_steps();
        let mut norm = vec![0.0; t * n];
        for node in 0..n {
            for step in 0..t {
                norm[step * n + node] = normalizer.apply(table.get(node, step));
            }
        }
        let calendar = (0..t).map(|s| table.calendar(s)).collect();
        Ok(Self { table, normalizer, splits, masks, basis, t_in, t_out, norm, calendar })
    }

    /// Splits the readings, fits the normalizer and builds views and basis from the training range.
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        table: ReadingsTable,
        graph: &RoadGraph,
        ratios: SplitRatios,
        views: &ViewConfig,
        k: usize,
        t_in: usize,
        t_out: usize,
    ) -> Result<Self, PipelineError> {
        table.ensure_nodes(graph.n_nodes())?;
        let splits = chronological_split(table.n_steps(), ratios, t_in + t_out)?;
        let history = table.slice_steps(splits.train.clone());
        let normalizer = Normalizer::fit(&history)?;
        let masks = SpatialMasks::from_views(&build_views(graph, &history, views)?);
        let basis = laplacian_basis(graph, k)?.vectors;
        Self::new(table, splits, normalizer, masks, basis, t_in, t_out)
    }

    pub fn n_nodes(&self) -> usize {
        self.table.n_nodes()
    }

    pub fn train_windows(&self) -> Vec<usize> {
        window_starts(self.splits.train.clone(), self.t_in, self.t_out)
    }

    pub fn val_windows(&self) -> Vec<usize> {
        window_starts(self.splits.val.clone(), self.t_in, self.t_out)
    }

    pub fn test_windows(&self) -> Vec<usize> {
        window_starts(self.splits.test.clone(), self.t_in, self.t_out)
    }

    pub fn batch(&self, starts: &[usize]) -> Batch {
        let n = self.n_nodes();
        let (t_in, t_out) = (self.t_in, self.t_out);
        let mut x = Vec::with_capacity(starts.len() * t_in * n);
        let mut y = Vec::with_capacity(starts.len() * t_out * n);
        let mut calendar = Vec::with_capacity(starts.len() * t_in);
        for &s in starts {
            x.extend_from_slice(&self.norm[s * n..(s + t_in) * n]);
            y.extend_from_slice(&self.norm[(s + t_in) * n..(s + t_in + t_out) * n]);
            calendar.extend_from_slice(&self.calendar[s..s + t_in]);
        }
        let b = starts.len();
        Batch {
            starts: starts.to_vec(),
            input: ModelInput { x: Tensor::new(vec![b, t_in, n], x).expect("window shape"), calendar },
            target: Tensor::new(vec![b, t_out, n], y).expect("window shape"),
        }
    }

    /// Raw (de-normalized) target of the window starting at `start`, `T′ × N`.
    pub fn raw_target(&self, start: usize) -> Vec<f64> {
        let n = self.n_nodes();
        let mut out = Vec::with_capacity(self.t_out * n);
        for step in start + self.t_in..start + self.t_in + self.t_out {
            out.extend((0..n).map(|node| self.table.get(node, step)));
        }
        out
    }
}
