use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::numerics::Tensor;

/// Global z-score fitted on training steps only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Population mean and standard deviation of every value in `train` (`N × T_train`).
    pub fn fit(train: &Tensor) -> Result<Self, PipelineError> {
        let n = train.len() as f64;
        let mean = train.data().iter().sum::<f64>() / n;
        let var = train.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12) {
            return Err(PipelineError::Input("training split is constant; cannot normalize".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.apply(v))
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|v| self.invert(v))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes") + "\n"
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
        let n: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        if !(n.std > 0.0) || !n.mean.is_finite() {
            return Err(PipelineError::Input(format!("{}: std must be positive", path.display())));
        }
        Ok(n)
    }
}
