use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Dataset, MetricsAccumulator, MetricsReport, PipelineError};
use crate::numerics::{Dropout, NumericsError, Tape, Tensor};
use crate::stformer::Model;

const EVAL_CHUNK: usize = 64;
const DROPOUT_STREAM: u64 = 0x5eed_d40f;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8, batch_size: 16, max_epochs: 200, patience: 15, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be a nonnegative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs 0 ≤ β < 1 and ε > 0".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Normalized-scale losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (the last one without validation windows).
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub optimizer_steps: usize,
}

/// Trains on the dataset's training windows with early stopping on its validation windows.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport, PipelineError> {
    train_on(model, ds, &ds.train_windows(), &ds.val_windows(), cfg, on_epoch)
}

/// Trains on explicit window starts. With no validation windows every epoch runs and the final weights are kept.
pub fn train_on(
    model: &mut Model,
    ds: &Dataset,
    train_windows: &[usize],
    val_windows: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(PipelineError::Input("no training windows".into()));
    }
    let mut order = train_windows.to_vec();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = Dropout::new(model.config.dropout, ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM));
    let mut adam = Adam::new(cfg.adam(), &model.params);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let nonfinite = |e: NumericsError| match e {
                NumericsError::NonFinite(what) => PipelineError::NonFinite { epoch, batch: bi + 1, detail: what },
                other => other.into(),
            };
            let batch = ds.batch(chunk);
            let mut tape = Tape::new();
            let bp = model.params.register(&mut tape, true);
            let drop = (model.config.dropout > 0.0).then_some(&mut dropout);
            let f = model.forward(&mut tape, &bp, &batch.input, &ds.masks, &ds.basis, drop).map_err(nonfinite)?;
            let loss = tape.mae_loss(f.pred, &batch.target).map_err(nonfinite)?;
            let grads = tape.backward(loss).map_err(nonfinite)?;
            let slots: Vec<Option<&[f64]>> = bp.vars().iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut model.params, &slots);
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
        }
        let train_mae = loss_sum / order.len() as f64;
        let val_mae = if val_windows.is_empty() { None } else { Some(normalized_mae(model, ds, val_windows)?) };
        let log = EpochLog { epoch, train_mae, val_mae };
        on_epoch(&log);
        epochs.push(log);

        if let Some(v) = val_mae {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_mae) = match best {
        Some((v, e, params)) => {
            model.params = params;
            (e, Some(v))
        }
        None => (epochs.len(), None),
    };
    Ok(TrainReport { epochs, best_epoch, best_val_mae, optimizer_steps: adam.steps() as usize })
}

/// Normalized-scale predictions `[B, T′, N]` for each chunk of windows, in order.
fn predict_chunks(model: &Model, ds: &Dataset, starts: &[usize]) -> Result<Vec<(Vec<usize>, Tensor)>, PipelineError> {
    starts
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let batch = ds.batch(chunk);
            let pred = model.predict(&batch.input, &ds.masks, &ds.basis)?;
            Ok((chunk.to_vec(), pred))
        })
        .collect()
}

/// Mean absolute error on the normalized scale.
pub fn normalized_mae(model: &Model, ds: &Dataset, starts: &[usize]) -> Result<f64, PipelineError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (chunk, pred) in predict_chunks(model, ds, starts)? {
        let target = ds.batch(&chunk).target;
        sum += pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>();
        count += pred.len();
    }
    Ok(sum / count as f64)
}

/// De-normalized predictions, one `T′ × N` row-major block per window.
pub fn predict_windows(model: &Model, ds: &Dataset, starts: &[usize]) -> Result<Vec<Vec<f64>>, PipelineError> {
    let block = ds.t_out * ds.n_nodes();
    let mut out = Vec::with_capacity(starts.len());
    for (_, pred) in predict_chunks(model, ds, starts)? {
        out.extend(pred.data().chunks(block).map(|b| b.iter().map(|&v| ds.normalizer.invert(v)).collect()));
    }
    Ok(out)
}

/// MAE/RMSE/MAPE of de-normalized predictions over the given windows.
pub fn evaluate(model: &Model, ds: &Dataset, starts: &[usize]) -> Result<MetricsReport, PipelineError> {
    if starts.is_empty() {
        return Err(PipelineError::Input("cannot evaluate an empty split".into()));
    }
    let n = ds.n_nodes();
    let mut horizons = vec![MetricsAccumulator::default(); ds.t_out];
    for (pred, &start) in predict_windows(model, ds, starts)?.iter().zip(starts) {
        let target = ds.raw_target(start);
        for (h, acc) in horizons.iter_mut().enumerate() {
            acc.extend(&pred[h * n..(h + 1) * n], &target[h * n..(h + 1) * n]);
        }
    }
    Ok(MetricsReport::from_horizons(starts.len(), &horizons, ds.table.interval_minutes))
}
