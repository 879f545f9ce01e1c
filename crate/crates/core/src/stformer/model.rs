use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, CalendarIndex, EmbedConfig, EmbeddingParams};
use crate::numerics::{Dropout, MaskMode, NumericsError, Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

use super::attention::dims4;
use super::layer::{encoder_layer, LayerOptions, LayerParams};
use super::{ModelError, SpatialMasks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub d: usize,
    /// Laplacian eigenvectors per node.
    pub k: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub steps_per_day: usize,
    pub layers: usize,
    pub spatial_heads: usize,
    pub temporal_heads: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub stcb: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_nodes: 0,
            d: 64,
            k: 8,
            t_in: 12,
            t_out: 12,
            steps_per_day: 288,
            layers: 6,
            spatial_heads: 4,
            temporal_heads: 4,
            dropout: 0.1,
            mask_mode: MaskMode::Exclude,
            stcb: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_nodes < 2 {
            return bad(format!("need at least 2 nodes, got {}", self.n_nodes));
        }
        if self.d == 0 || self.t_in == 0 || self.t_out == 0 || self.steps_per_day == 0 || self.layers == 0 {
            return bad("d, t_in, t_out, steps_per_day and layers must all be positive".into());
        }
        if self.k == 0 || self.k > self.n_nodes - 1 {
            return bad(format!("k must satisfy 0 < k ≤ N−1 (k={}, N={})", self.k, self.n_nodes));
        }
        for (name, h) in [("spatial_heads", self.spatial_heads), ("temporal_heads", self.temporal_heads)] {
            if h == 0 || !self.d.is_multiple_of(h) {
                return bad(format!("{name}={h} must divide d={}", self.d));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig { d: self.d, k: self.k, t_in: self.t_in, steps_per_day: self.steps_per_day }
    }

    fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            spatial_heads: self.spatial_heads,
            temporal_heads: self.temporal_heads,
            mask_mode: self.mask_mode,
            stcb: self.stcb,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    /// `(T·d) × T′`, applied per node.
    pub w2: ParamId,
    pub b2: ParamId,
}

/// A batch of input windows.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `[B, T, N]`, normalized.
    pub x: Tensor,
    /// `B·T` entries, batch-major.
    pub calendar: Vec<CalendarIndex>,
}

/// Result of a forward pass.
pub struct Forward {
    /// `[B, T′, N]`, normalized scale.
    pub pred: Var,
    pub layers: Vec<super::LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: EmbeddingParams,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedding = EmbeddingParams::init(&mut params, &config.embed_config(), &mut rng);
        let layers = (0..config.layers)
            .map(|l| LayerParams::init(&mut params, &format!("layer{l}"), config.d, &mut rng))
            .collect();
        let d = config.d;
        let td = config.t_in * d;
        let head = HeadParams {
            w1: params.add_uniform("head.w1", &[d, d], 1.0 / (d as f64).sqrt(), &mut rng),
            b1: params.add_zeros("head.b1", &[d]),
            w2: params.add_uniform("head.w2", &[td, config.t_out], 1.0 / (td as f64).sqrt(), &mut rng),
            b2: params.add_zeros("head.b2", &[config.t_out]),
        };
        Ok(Self { config, params, embedding, layers, head })
    }

    /// Rebuilds a model with the given config and replaces its parameters by name.
    pub fn from_params(config: ModelConfig, loaded: ParamStore) -> Result<Self, ModelError> {
        let mut m = Self::new(config, 0)?;
        if loaded.len() != m.params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                m.params.len()
            )));
        }
        for id in m.params.ids().collect::<Vec<_>>() {
            let name = m.params.name(id).to_string();
            let src = loaded
                .id_of(&name)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks parameter {name}")))?;
            let t = loaded.get(src);
            if t.shape() != m.params.get(id).shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    m.params.get(id).shape()
                )));
            }
            *m.params.get_mut(id) = t.clone();
        }
        Ok(m)
    }

    /// Full forward pass. Pass `dropout` only when training.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        input: &ModelInput,
        masks: &SpatialMasks,
        basis: &Tensor,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Forward, NumericsError> {
        let cfg = &self.config;
        let [b, t, n] = match input.x.shape()[..] {
            [b, t, n] => [b, t, n],
            ref s => return Err(NumericsError::Shape(format!("input must be [B,T,N], got {s:?}"))),
        };
        if n != cfg.n_nodes || t != cfg.t_in {
            return Err(NumericsError::Shape(format!(
                "input [B={b}, T={t}, N={n}] does not match model (T={}, N={})",
                cfg.t_in, cfg.n_nodes
            )));
        }
        if basis.shape() != [n, cfg.k] {
            return Err(NumericsError::Shape(format!(
                "basis {:?} does not match [N={n}, k={}]",
                basis.shape(),
                cfg.k
            )));
        }
        let x = tape.constant(input.x.clone());
        let basis = tape.constant(basis.clone());
        let mut z = embed(tape, &self.embedding, bp, &cfg.embed_config(), x, &input.calendar, basis)?;
        let opts = cfg.layer_options();
        let mut traces = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let tr = encoder_layer(tape, lp, bp, z, masks, &opts, dropout.as_deref_mut())?;
            z = tr.out;
            traces.push(tr);
        }
        let pred = regression_head(tape, &self.head, bp, z, cfg.t_out)?;
        Ok(Forward { pred, layers: traces })
    }

    /// Inference without gradients; returns predictions `[B, T′, N]` (normalized scale).
    pub fn predict(&self, input: &ModelInput, masks: &SpatialMasks, basis: &Tensor) -> Result<Tensor, NumericsError> {
        let mut tape = Tape::new();
        let bp = self.params.register(&mut tape, false);
        let f = self.forward(&mut tape, &bp, input, masks, basis, None)?;
        Ok(tape.value(f.pred).clone())
    }

    /// Per-layer spatial attention for the first window of `input`, averaged over heads and time steps.
    pub fn attention_maps(
        &self,
        input: &ModelInput,
        masks: &SpatialMasks,
        basis: &Tensor,
    ) -> Result<Vec<AttentionMaps>, NumericsError> {
        let mut tape = Tape::new();
        let bp = self.params.register(&mut tape, false);
        let f = self.forward(&mut tape, &bp, input, masks, basis, None)?;
        let (t, n) = (self.config.t_in, self.config.n_nodes);
        let h = self.config.spatial_heads;
        let avg = |v: Var| {
            let probs = tape.attention_probs(v).expect("attention node");
            let mut out = Tensor::zeros(&[n, n]);
            // first window occupies groups 0..t
            for g in 0..t {
                for head in 0..h {
                    let base = (g * h + head) * n * n;
                    for (o, p) in out.data_mut().iter_mut().zip(&probs[base..base + n * n]) {
                        *o += p / (t * h) as f64;
                    }
                }
            }
            out
        };
        Ok(f.layers
            .iter()
            .map(|tr| AttentionMaps {
                local: avg(tr.spatial_probs[0]),
                global: avg(tr.spatial_probs[1]),
                pivotal: avg(tr.spatial_probs[2]),
            })
            .collect())
    }
}

/// Head- and time-averaged `N×N` spatial attention of one layer.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub local: Tensor,
    pub global: Tensor,
    pub pivotal: Tensor,
}

/// Pointwise `d → d` with GELU, then per node `(T·d) → T′`. Output `[B, T′, N]`.
pub fn regression_head(
    tape: &mut Tape,
    hp: &HeadParams,
    bp: &BoundParams,
    z: Var,
    t_out: usize,
) -> Result<Var, NumericsError> {
    let [b, t, n, d] = dims4(tape, z)?;
    let h = tape.linear(z, bp.var(hp.w1), Some(bp.var(hp.b1)))?;
    let h = tape.gelu(h)?;
    let per_node = tape.permute(h, &[0, 2, 1, 3])?;
    let flat = tape.reshape(per_node, &[b, n, t * d])?;
    let y = tape.linear(flat, bp.var(hp.w2), Some(bp.var(hp.b2)))?;
    if tape.shape(y)[2] != t_out {
        return Err(NumericsError::Shape(format!("head emits {} steps, expected {t_out}", tape.shape(y)[2])));
    }
    tape.permute(y, &[0, 2, 1])
}
