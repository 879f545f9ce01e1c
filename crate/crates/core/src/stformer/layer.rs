use rand_chacha::ChaCha8Rng;

use crate::numerics::{Dropout, MaskMode, NumericsError, Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

use super::attention::{dims4, masked_spatial_attention, temporal_attention, AttentionParams};
use super::SpatialMasks;

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub local: AttentionParams,
    pub global: AttentionParams,
    pub pivotal: AttentionParams,
    pub temporal: AttentionParams,
    pub filter_w: ParamId,
    pub filter_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl LayerParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let b1 = 1.0 / (d as f64).sqrt();
        let b4 = 1.0 / ((4 * d) as f64).sqrt();
        Self {
            local: AttentionParams::init(store, &format!("{prefix}.local"), d, rng),
            global: AttentionParams::init(store, &format!("{prefix}.global"), d, rng),
            pivotal: AttentionParams::init(store, &format!("{prefix}.pivotal"), d, rng),
            temporal: AttentionParams::init(store, &format!("{prefix}.temporal"), d, rng),
            filter_w: store.add_uniform(format!("{prefix}.filter.w"), &[d, d], b1, rng),
            filter_b: store.add_zeros(format!("{prefix}.filter.b"), &[d]),
            gate_w: store.add_uniform(format!("{prefix}.gate.w"), &[d, d], b1, rng),
            gate_b: store.add_zeros(format!("{prefix}.gate.b"), &[d]),
            fuse_w: store.add_uniform(format!("{prefix}.fuse.w"), &[4 * d, d], b4, rng),
            fuse_b: store.add_zeros(format!("{prefix}.fuse.b"), &[d]),
            ffn1_w: store.add_uniform(format!("{prefix}.ffn1.w"), &[d, 4 * d], b1, rng),
            ffn1_b: store.add_zeros(format!("{prefix}.ffn1.b"), &[4 * d]),
            ffn2_w: store.add_uniform(format!("{prefix}.ffn2.w"), &[4 * d, d], b4, rng),
            ffn2_b: store.add_zeros(format!("{prefix}.ffn2.b"), &[d]),
            ln1_gain: store.add_full(format!("{prefix}.ln1.gain"), &[d], 1.0),
            ln1_bias: store.add_zeros(format!("{prefix}.ln1.bias"), &[d]),
            ln2_gain: store.add_full(format!("{prefix}.ln2.gain"), &[d], 1.0),
            ln2_bias: store.add_zeros(format!("{prefix}.ln2.bias"), &[d]),
        }
    }
}

/// Structural switches shared by every layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOptions {
    pub spatial_heads: usize,
    pub temporal_heads: usize,
    pub mask_mode: MaskMode,
    pub stcb: bool,
}

/// Outputs of one layer plus the attention nodes, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub out: Var,
    /// Local, global, pivotal probability nodes (`[B·T, heads, N, N]`).
    pub spatial_probs: [Var; 3],
    /// `[B·N, heads, T, T]`.
    pub temporal_probs: Var,
}

/// The three masked spatial branches applied at every time step with shared weights.
pub fn mvsa(
    tape: &mut Tape,
    lp: &LayerParams,
    bp: &BoundParams,
    z: Var,
    masks: &SpatialMasks,
    opts: &LayerOptions,
    mut dropout: Option<&mut Dropout>,
) -> Result<([Var; 3], [Var; 3]), NumericsError> {
    let [b, t, n, d] = dims4(tape, z)?;
    if masks.n_nodes() != n {
        return Err(NumericsError::Shape(format!("masks are for {} nodes, input has {n}", masks.n_nodes())));
    }
    let slices = tape.reshape(z, &[b * t, n, d])?;
    let branches: [(&AttentionParams, &Tensor); 3] =
        [(&lp.local, &masks.local), (&lp.global, &masks.global), (&lp.pivotal, &masks.pivotal)];
    let mut outs = [z; 3];
    let mut probs = [z; 3];
    for (i, (p, mask)) in branches.into_iter().enumerate() {
        let r = masked_spatial_attention(
            tape,
            p,
            bp,
            slices,
            mask,
            opts.spatial_heads,
            opts.mask_mode,
            dropout.as_deref_mut(),
        )?;
        outs[i] = tape.reshape(r.out, &[b, t, n, d])?;
        probs[i] = r.probs;
    }
    Ok((outs, probs))
}

/// `tanh(z W_f + b_f) ⊙ sigmoid(z W_g + b_g)`.
pub fn gated_filter(tape: &mut Tape, lp: &LayerParams, bp: &BoundParams, z: Var) -> Result<Var, NumericsError> {
    let f = tape.linear(z, bp.var(lp.filter_w), Some(bp.var(lp.filter_b)))?;
    let f = tape.tanh(f)?;
    let g = tape.linear(z, bp.var(lp.gate_w), Some(bp.var(lp.gate_b)))?;
    let g = tape.sigmoid(g)?;
    tape.mul(f, g)
}

/// Concat branches → linear → residual → LN → MLP (FC, GELU, FC, STCB) → residual → LN.
#[allow(clippy::too_many_arguments)]
pub fn fuse_and_ffn(
    tape: &mut Tape,
    lp: &LayerParams,
    bp: &BoundParams,
    branches: [Var; 4],
    z_in: Var,
    stcb: bool,
    dropout: Option<&mut Dropout>,
) -> Result<Var, NumericsError> {
    let shape = tape.shape(z_in).to_vec();
    for &br in &branches {
        if tape.shape(br) != shape.as_slice() {
            return Err(NumericsError::Shape(format!(
                "branch output {:?} does not match layer input {shape:?}",
                tape.shape(br)
            )));
        }
    }
    let h = tape.concat(&branches)?;
    let h = tape.linear(h, bp.var(lp.fuse_w), Some(bp.var(lp.fuse_b)))?;
    let r = tape.add(h, z_in)?;
    let r1 = tape.layer_norm(r, bp.var(lp.ln1_gain), bp.var(lp.ln1_bias))?;
    let m = tape.linear(r1, bp.var(lp.ffn1_w), Some(bp.var(lp.ffn1_b)))?;
    let m = tape.gelu(m)?;
    let m = tape.dropout(m, dropout)?;
    let m = tape.linear(m, bp.var(lp.ffn2_w), Some(bp.var(lp.ffn2_b)))?;
    let m = if stcb { tape.stcb(m)? } else { m };
    let r2 = tape.add(r1, m)?;
    tape.layer_norm(r2, bp.var(lp.ln2_gain), bp.var(lp.ln2_bias))
}

/// One encoder layer on `z[B,T,N,d]`.
pub fn encoder_layer(
    tape: &mut Tape,
    lp: &LayerParams,
    bp: &BoundParams,
    z: Var,
    masks: &SpatialMasks,
    opts: &LayerOptions,
    mut dropout: Option<&mut Dropout>,
) -> Result<LayerTrace, NumericsError> {
    let ([hl, hg, hp], spatial_probs) = mvsa(tape, lp, bp, z, masks, opts, dropout.as_deref_mut())?;
    let zbar = gated_filter(tape, lp, bp, z)?;
    let ht = temporal_attention(tape, &lp.temporal, bp, zbar, opts.temporal_heads, dropout.as_deref_mut())?;
    let out = fuse_and_ffn(tape, lp, bp, [hl, hg, hp, ht.out], z, opts.stcb, dropout)?;
    Ok(LayerTrace { out, spatial_probs, temporal_probs: ht.probs })
}
