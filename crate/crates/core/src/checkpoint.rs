//! Binary checkpoints of named tensors.
//!
//! Layout (little endian): the 8-byte magic `ICESCKPT`, a `u32` layout
//! version, a `u32` tensor count, then per tensor a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u64` extents and the `f64` values.

use std::io::{Read, Write};

use crate::error::{IcesError, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ICESCKPT";
pub const VERSION: u32 = 1;

pub fn write_store<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| IcesError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| IcesError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every `(name, tensor)` pair in file order.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| IcesError::Checkpoint("file too short for a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(IcesError::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(IcesError::Checkpoint(format!("unsupported layout version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| IcesError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| IcesError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites the values of `store` from a checkpoint with the same names
/// and shapes in the same order.
pub fn load_into<R: Read>(store: &mut ParamStore, r: R) -> Result<()> {
    let tensors = read_tensors(r)?;
    if tensors.len() != store.len() {
        return Err(IcesError::Checkpoint(format!("checkpoint has {} tensors, model has {}", tensors.len(), store.len())));
    }
    for (id, (name, t)) in store.ids().collect::<Vec<_>>().into_iter().zip(tensors) {
        if store.name(id) != name || store.get(id).shape != t.shape {
            return Err(IcesError::Checkpoint(format!("tensor `{name}` {:?} does not match `{}`", t.shape, store.name(id))));
        }
        store.get_mut(id).data = t.data;
    }
    Ok(())
}
