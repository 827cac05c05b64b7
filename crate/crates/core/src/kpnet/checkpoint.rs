//! Binary parameter files: magic, layer-plan digest, then every parameter as
//! (name, shape, little-endian `f64` values).

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const MAGIC: &[u8; 8] = b"WKPTCKP1";

pub fn encode_checkpoint(digest: &[u8; 32], store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(digest);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Overwrite the values of `store` from an encoded checkpoint. The digest,
/// parameter names and shapes must all match the store's layout.
pub fn decode_checkpoint(bytes: &[u8], digest: &[u8; 32], store: &mut ParamStore) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    if r.take(32)? != digest {
        return Err(Error::Checkpoint("layer plan digest mismatch".into()));
    }
    let count = r.u64()? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!("{count} parameters stored, model has {}", store.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (_, p) in store.iter() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected parameter {}, found {name}", p.name)));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", p.shape)));
        }
        let raw = r.take(p.value.len() * 8)?;
        values.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect::<Vec<_>>());
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last parameter".into()));
    }
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, digest: &[u8; 32], store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(digest, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, digest: &[u8; 32], store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, digest, store)
}
