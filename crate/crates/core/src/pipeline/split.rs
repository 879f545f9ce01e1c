use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!(
                "split ratios must be positive and sum to 1, got {}:{}:{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Contiguous chronological step ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Floor-rounded boundaries with the remainder going to test. Every split must hold one window.
pub fn chronological_split(n_steps: usize, ratios: SplitRatios, window: usize) -> Result<Splits, PipelineError> {
    ratios.validate()?;
    // The epsilon keeps decimal ratios such as 0.7·100 from flooring to 69.
    let floor = |r: f64| (n_steps as f64 * r + 1e-9).floor() as usize;
    let train_end = floor(ratios.train);
    let val_end = train_end + floor(ratios.val);
    let s = Splits { train: 0..train_end, val: train_end..val_end, test: val_end..n_steps };
    for (name, r) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        if r.len() < window {
            return Err(PipelineError::Config(format!(
                "{name} split has {} steps, fewer than one window of {window}",
                r.len()
            )));
        }
    }
    Ok(s)
}

/// Start steps of stride-1 windows of `t_in + t_out` steps lying inside `range`.
pub fn window_starts(range: Range<usize>, t_in: usize, t_out: usize) -> Vec<usize> {
    let span = t_in + t_out;
    if range.len() < span {
        return Vec::new();
    }
    (range.start..=range.end - span).collect()
}
