//! Spatio-temporal input embedding: raw values, calendar tables, sinusoidal
//! positions and projected Laplacian coordinates, fused to `T×N×d`.
//!
//! All ops take a leading batch axis `B`; a single window is `B = 1`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

pub const DAYS_PER_WEEK: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub d: usize,
    pub k: usize,
    pub t_in: usize,
    pub steps_per_day: usize,
}

impl EmbedConfig {
    /// Channels of the time-of-day table (the larger half when `d` is odd).
    pub fn tod_width(&self) -> usize {
        self.d.div_ceil(2)
    }

    pub fn dow_width(&self) -> usize {
        self.d - self.tod_width()
    }
}

/// Calendar position of one time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalendarIndex {
    /// Slot within the day, `0..steps_per_day`.
    pub tod: usize,
    /// Monday = 0.
    pub dow: usize,
}

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub raw_w: ParamId,
    pub raw_b: ParamId,
    pub tod_table: ParamId,
    pub dow_table: ParamId,
    pub spatial_proj: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl EmbeddingParams {
    /// Uniform `[-1/√d, 1/√d]` initialisation for every table and projection; biases start at zero.
    pub fn init(store: &mut ParamStore, cfg: &EmbedConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            raw_w: store.add_uniform("embed.raw.w", &[1, d], bound, rng),
            raw_b: store.add_zeros("embed.raw.b", &[d]),
            tod_table: store.add_uniform("embed.tod", &[cfg.steps_per_day, cfg.tod_width()], bound, rng),
            dow_table: store.add_uniform("embed.dow", &[DAYS_PER_WEEK, cfg.dow_width().max(1)], bound, rng),
            spatial_proj: store.add_uniform("embed.spatial.w", &[cfg.k, d], bound, rng),
            fuse_w: store.add_uniform("embed.fuse.w", &[4 * d, d], bound, rng),
            fuse_b: store.add_zeros("embed.fuse.b", &[d]),
        }
    }
}

/// `x[B,T,N] → [B,T,N,d]`: one scalar-to-`d` affine map shared by every position.
pub fn embed_raw(tape: &mut Tape, p: &EmbeddingParams, bp: &BoundParams, x: Var) -> Result<Var, NumericsError> {
    let mut shape = tape.shape(x).to_vec();
    shape.push(1);
    let x1 = tape.reshape(x, &shape)?;
    tape.linear(x1, bp.var(p.raw_w), Some(bp.var(p.raw_b)))
}

/// Time-of-day and day-of-week lookups concatenated per step. `cal` is `B·T` entries, batch-major.
pub fn embed_periodic(
    tape: &mut Tape,
    p: &EmbeddingParams,
    bp: &BoundParams,
    cal: &[CalendarIndex],
    batch: usize,
    cfg: &EmbedConfig,
) -> Result<Var, NumericsError> {
    if cal.len() != batch * cfg.t_in {
        return Err(NumericsError::Shape(format!(
            "calendar has {} steps, expected {}×{}",
            cal.len(),
            batch,
            cfg.t_in
        )));
    }
    for c in cal {
        if c.tod >= cfg.steps_per_day || c.dow >= DAYS_PER_WEEK {
            return Err(NumericsError::Input(format!(
                "calendar index (tod {}, dow {}) outside [0,{}) × [0,{DAYS_PER_WEEK})",
                c.tod, c.dow, cfg.steps_per_day
            )));
        }
    }
    let tod: Vec<usize> = cal.iter().map(|c| c.tod).collect();
    let dow: Vec<usize> = cal.iter().map(|c| c.dow).collect();
    let e_d = tape.gather_rows(bp.var(p.tod_table), &tod)?;
    let e = if cfg.dow_width() == 0 {
        e_d
    } else {
        let e_w = tape.gather_rows(bp.var(p.dow_table), &dow)?;
        tape.concat(&[e_d, e_w])?
    };
    tape.reshape(e, &[batch, cfg.t_in, cfg.d])
}

/// Sinusoidal position table `[t × d]`: `sin(p/10000^{i/d})` on even channels, `cos(p/10000^{(i−1)/d})` on odd.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for p in 0..t {
        for i in 0..d {
            let v = if i % 2 == 0 {
                (p as f64 / 10000f64.powf(i as f64 / d as f64)).sin()
            } else {
                (p as f64 / 10000f64.powf((i - 1) as f64 / d as f64)).cos()
            };
            pe.set2(p, i, v);
        }
    }
    pe
}

/// Projects each node's `k` Laplacian coordinates to `d` channels.
pub fn embed_spatial(tape: &mut Tape, p: &EmbeddingParams, bp: &BoundParams, basis: Var) -> Result<Var, NumericsError> {
    tape.matmul(basis, bp.var(p.spatial_proj))
}

/// Broadcasts `e_p[B,T,d]`, `e_s[N,d]`, `e_tpe[T,d]` to `[B,T,N,d]`, concatenates with `e_f`, projects `4d → d`.
pub fn fuse(
    tape: &mut Tape,
    p: &EmbeddingParams,
    bp: &BoundParams,
    e_f: Var,
    e_p: Var,
    e_s: Var,
    e_tpe: Var,
) -> Result<Var, NumericsError> {
    let full = tape.shape(e_f).to_vec();
    let [b, t, n, d] = full[..] else {
        return Err(NumericsError::Shape(format!("raw embedding must be [B,T,N,d], got {full:?}")));
    };
    let expect = |name: &str, got: &[usize], want: &[usize]| {
        if got == want {
            Ok(())
        } else {
            Err(NumericsError::Shape(format!("{name} has shape {got:?}, expected {want:?}")))
        }
    };
    expect("periodic embedding", tape.shape(e_p), &[b, t, d])?;
    expect("spatial embedding", tape.shape(e_s), &[n, d])?;
    expect("position encoding", tape.shape(e_tpe), &[t, d])?;
    let ep = tape.reshape(e_p, &[b, t, 1, d])?;
    let ep = tape.broadcast(ep, &full)?;
    let es = tape.reshape(e_s, &[1, 1, n, d])?;
    let es = tape.broadcast(es, &full)?;
    let et = tape.reshape(e_tpe, &[1, t, 1, d])?;
    let et = tape.broadcast(et, &full)?;
    let z = tape.concat(&[e_f, ep, es, et])?;
    tape.linear(z, bp.var(p.fuse_w), Some(bp.var(p.fuse_b)))
}

/// Full embedding of a batch: `x[B,T,N]`, calendar `B·T`, basis `[N,k]` → `Z[B,T,N,d]`.
pub fn embed(
    tape: &mut Tape,
    p: &EmbeddingParams,
    bp: &BoundParams,
    cfg: &EmbedConfig,
    x: Var,
    cal: &[CalendarIndex],
    basis: Var,
) -> Result<Var, NumericsError> {
    let shape = tape.shape(x).to_vec();
    let [batch, t, _n] = shape[..] else {
        return Err(NumericsError::Shape(format!("input window must be [B,T,N], got {shape:?}")));
    };
    if t != cfg.t_in {
        return Err(NumericsError::Shape(format!("window length {t} does not match configured {}", cfg.t_in)));
    }
    if tape.shape(basis)[1] != cfg.k {
        return Err(NumericsError::Shape(format!(
            "basis has {} columns, configured k = {}",
            tape.shape(basis)[1],
            cfg.k
        )));
    }
    let e_f = embed_raw(tape, p, bp, x)?;
    let e_p = embed_periodic(tape, p, bp, cal, batch, cfg)?;
    let e_s = embed_spatial(tape, p, bp, basis)?;
    let e_tpe = tape.constant(positional_encoding(t, cfg.d));
    fuse(tape, p, bp, e_f, e_p, e_s, e_tpe)
}
