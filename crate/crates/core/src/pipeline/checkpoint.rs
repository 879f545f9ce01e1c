use std::io::{Read, Write};
use std::path::Path;

use super::PipelineError;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::stformer::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVST";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version, config block (length-prefixed JSON), tensor count, then per tensor
/// name length, name, rank, extents and the little-endian `f64` payload. Integers are little-endian.
pub fn write_checkpoint(mut w: impl Write, model: &Model) -> Result<(), PipelineError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model, PipelineError> {
    let bad = |m: &str| PipelineError::Input(format!("corrupt checkpoint: {m}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("missing LVST magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::Input(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let cfg_bytes = read_bytes(&mut r, cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes).map_err(|e| bad(&format!("config block: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(&format!("parameter {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| bad("shape overflow"))?;
        let bytes = read_bytes(&mut r, len.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        t.ensure_finite(&name)?;
        store.add(name, t);
    }
    Ok(Model::from_params(config, store)?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<(), PipelineError> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, PipelineError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)
        .map_err(|e| PipelineError::Input(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(f))
}

fn read_u32(r: &mut impl Read) -> Result<u32, PipelineError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| PipelineError::Input("corrupt checkpoint: truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(PipelineError::Input("corrupt checkpoint: truncated".into()));
    }
    Ok(buf)
}
