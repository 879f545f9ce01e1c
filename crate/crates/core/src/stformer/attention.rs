use crate::numerics::{AttentionOpts, Dropout, MaskMode, NumericsError, Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

use rand_chacha::ChaCha8Rng;

/// Q/K/V projections (heads stacked along the output channels) and the output projection.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            wq: store.add_uniform(format!("{prefix}.wq"), &[d, d], bound, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), &[d, d], bound, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), &[d, d], bound, rng),
            wo: store.add_uniform(format!("{prefix}.wo"), &[d, d], bound, rng),
        }
    }
}

/// Output of one attention call: the projected result and the raw attention node.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub out: Var,
    /// Node holding probabilities `[groups, heads, seq, seq]`; see [`Tape::attention_probs`].
    pub probs: Var,
}

/// Multi-head self-attention within each group of `z[G, S, d]`, optionally masked.
pub fn grouped_attention(
    tape: &mut Tape,
    p: &AttentionParams,
    bp: &BoundParams,
    z: Var,
    heads: usize,
    mask: Option<&Tensor>,
    mode: MaskMode,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOut, NumericsError> {
    let q = tape.matmul(z, bp.var(p.wq))?;
    let k = tape.matmul(z, bp.var(p.wk))?;
    let v = tape.matmul(z, bp.var(p.wv))?;
    let a = tape.attention(q, k, v, AttentionOpts { heads, mask, mode, dropout })?;
    let out = tape.matmul(a, bp.var(p.wo))?;
    Ok(AttentionOut { out, probs: a })
}

/// One spatial branch on a single time slice `z_t[N, d]` (or a stack `[G, N, d]`).
pub fn masked_spatial_attention(
    tape: &mut Tape,
    p: &AttentionParams,
    bp: &BoundParams,
    z_t: Var,
    mask: &Tensor,
    heads: usize,
    mode: MaskMode,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOut, NumericsError> {
    let shape = tape.shape(z_t).to_vec();
    let z3 = match shape[..] {
        [n, d] => tape.reshape(z_t, &[1, n, d])?,
        [_, _, _] => z_t,
        _ => return Err(NumericsError::Shape(format!("spatial attention input must be [N,d] or [G,N,d], got {shape:?}"))),
    };
    let mut r = grouped_attention(tape, p, bp, z3, heads, Some(mask), mode, dropout)?;
    if shape.len() == 2 {
        r.out = tape.reshape(r.out, &shape)?;
    }
    Ok(r)
}

/// Per-node unmasked attention over the time axis of `z̄[B, T, N, d]`.
pub fn temporal_attention(
    tape: &mut Tape,
    p: &AttentionParams,
    bp: &BoundParams,
    zbar: Var,
    heads: usize,
    dropout: Option<&mut Dropout>,
) -> Result<AttentionOut, NumericsError> {
    let [b, t, n, d] = dims4(tape, zbar)?;
    let per_node = tape.permute(zbar, &[0, 2, 1, 3])?;
    let grouped = tape.reshape(per_node, &[b * n, t, d])?;
    let r = grouped_attention(tape, p, bp, grouped, heads, None, MaskMode::Exclude, dropout)?;
    let back = tape.reshape(r.out, &[b, n, t, d])?;
    let out = tape.permute(back, &[0, 2, 1, 3])?;
    Ok(AttentionOut { out, probs: r.probs })
}

pub(crate) fn dims4(tape: &Tape, v: Var) -> Result<[usize; 4], NumericsError> {
    match tape.shape(v)[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(NumericsError::Shape(format!("expected [B,T,N,d], got {s:?}"))),
    }
}
