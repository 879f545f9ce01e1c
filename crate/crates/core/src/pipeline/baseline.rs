use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Dataset, MetricsAccumulator, MetricsReport, PipelineError, ReadingsTable};
use crate::embedding::DAYS_PER_WEEK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    /// One slot per (day of week, time of day).
    Weekly,
    /// One slot per time of day, used when training covers less than a week.
    Daily,
}

/// Per-slot training means for every node.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    pub kind: SlotKind,
    steps_per_day: usize,
    /// `slots × N`.
    means: Vec<f64>,
    n_nodes: usize,
}

impl HistoricalAverage {
    pub fn fit(table: &ReadingsTable, train: Range<usize>) -> Result<Self, PipelineError> {
        if train.is_empty() || train.end > table.n_steps() {
            return Err(PipelineError::Input(format!("bad training range {train:?}")));
        }
        let spd = table.steps_per_day();
        let kind = if train.len() >= DAYS_PER_WEEK * spd { SlotKind::Weekly } else { SlotKind::Daily };
        let n = table.n_nodes();
        let slots = match kind {
            SlotKind::Weekly => DAYS_PER_WEEK * spd,
            SlotKind::Daily => spd,
        };
        let mut sums = vec![0.0; slots * n];
        let mut counts = vec![0usize; slots];
        let mut node_sum = vec![0.0; n];
        for step in train.clone() {
            let s = slot_of(kind, spd, table, step);
            counts[s] += 1;
            for node in 0..n {
                let v = table.get(node, step);
                sums[s * n + node] += v;
                node_sum[node] += v;
            }
        }
        for s in 0..slots {
            for node in 0..n {
                sums[s * n + node] = if counts[s] > 0 {
                    sums[s * n + node] / counts[s] as f64
                } else {
                    node_sum[node] / train.len() as f64
                };
            }
        }
        Ok(Self { kind, steps_per_day: spd, means: sums, n_nodes: n })
    }

    pub fn predict(&self, table: &ReadingsTable, node: usize, step: usize) -> f64 {
        self.means[slot_of(self.kind, self.steps_per_day, table, step) * self.n_nodes + node]
    }
}

fn slot_of(kind: SlotKind, spd: usize, table: &ReadingsTable, step: usize) -> usize {
    let c = table.calendar(step);
    match kind {
        SlotKind::Weekly => c.dow * spd + c.tod,
        SlotKind::Daily => c.tod,
    }
}

/// Scores the baseline on exactly the target cells the model is scored on.
pub fn ha_evaluate(ha: &HistoricalAverage, ds: &Dataset, starts: &[usize]) -> Result<MetricsReport, PipelineError> {
    if starts.is_empty() {
        return Err(PipelineError::Input("cannot evaluate an empty split".into()));
    }
    let n = ds.n_nodes();
    let mut horizons = vec![MetricsAccumulator::default(); ds.t_out];
    for &start in starts {
        let target = ds.raw_target(start);
        for (h, acc) in horizons.iter_mut().enumerate() {
            let step = start + ds.t_in + h;
            for node in 0..n {
                acc.push(ha.predict(&ds.table, node, step), target[h * n + node]);
            }
        }
    }
    Ok(MetricsReport::from_horizons(starts.len(), &horizons, ds.table.interval_minutes))
}
