//! Multi-level spatio-temporal transformer: masked spatial branches, gated
//! temporal attention, fusion with an STCB-terminated MLP, and the regression head.

mod attention;
mod check;
mod layer;
mod model;

pub use attention::{
    grouped_attention, masked_spatial_attention, temporal_attention, AttentionOut, AttentionParams,
};
pub use check::{model_gradcheck, GroupError, GRADCHECK_EPS};
pub use layer::{encoder_layer, fuse_and_ffn, gated_filter, mvsa, LayerOptions, LayerParams, LayerTrace};
pub use model::{
    regression_head, AttentionMaps, Forward, HeadParams, Model, ModelConfig, ModelInput,
};

use crate::graph_views::ViewMasks;
use crate::numerics::{stcb_forward, NumericsError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Masks as consumed by attention: local and global unchanged, pivotal divided by its largest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMasks {
    pub local: Tensor,
    pub global: Tensor,
    pub pivotal: Tensor,
}

impl SpatialMasks {
    pub fn from_views(v: &ViewMasks) -> Self {
        Self { local: v.local.clone(), global: v.global.clone(), pivotal: rescale_pivotal(&v.pivotal) }
    }

    pub fn n_nodes(&self) -> usize {
        self.local.shape()[0]
    }
}

/// Divides by the largest positive entry so weights fall in `(0, 1]`; an all-zero mask is returned as is.
pub fn rescale_pivotal(m: &Tensor) -> Tensor {
    let max = m.data().iter().copied().fold(0.0_f64, f64::max);
    if max > 0.0 {
        m.map(|v| v / max)
    } else {
        m.clone()
    }
}

/// Untracked spatio-temporal context broadcasting over the token axis of `[.., N, d]`.
pub fn stcb(z: &Tensor) -> Tensor {
    assert!(z.rank() >= 2, "stcb needs [.., tokens, channels]");
    Tensor::new(z.shape().to_vec(), stcb_forward(z.data(), z.shape())).expect("same shape")
}
