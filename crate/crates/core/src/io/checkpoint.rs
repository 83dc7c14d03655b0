//! Parameter checkpoints.
//!
//! Layout (little-endian): `DYCK`, u32 version, u32 entry count, then per
//! entry in key order: u32 name length, UTF-8 name, u32 rank, u32 dims,
//! u8 frozen flag. The f32 blobs follow in the same order.

use std::fs;
use std::path::Path;

use super::dyfl::read_u32;
use crate::error::{DyeError, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"DYCK";
const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> DyeError {
    DyeError::Format { what: "checkpoint", msg: msg.into() }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let push = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    push(&mut out, VERSION);
    push(&mut out, store.len() as u32);
    for (k, t) in store.iter() {
        push(&mut out, k.len() as u32);
        out.extend_from_slice(k.as_bytes());
        push(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            push(&mut out, d as u32);
        }
        out.push(store.is_frozen(k) as u8);
    }
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(fmt_err("bad magic"));
    }
    let mut pos = 4;
    let trunc = || fmt_err("truncated");
    let version = read_u32(bytes, &mut pos).ok_or_else(trunc)?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, &mut pos).ok_or_else(trunc)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(bytes, &mut pos).ok_or_else(trunc)? as usize;
        let name = bytes.get(pos..pos + len).ok_or_else(trunc)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| fmt_err("key is not UTF-8"))?;
        pos += len;
        let rank = read_u32(bytes, &mut pos).ok_or_else(trunc)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(bytes, &mut pos).map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(trunc)?;
        let frozen = *bytes.get(pos).ok_or_else(trunc)? != 0;
        pos += 1;
        if table.last().is_some_and(|(prev, _, _): &(String, _, _)| *prev >= name) {
            return Err(fmt_err("keys not sorted"));
        }
        table.push((name, dims, frozen));
    }
    let mut store = ParamStore::new();
    for (name, dims, frozen) in table {
        let n: usize = dims.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(trunc)?;
        pos += 4 * n;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(name.clone(), Tensor::new(&dims, data)?);
        if frozen {
            store.freeze(&name);
        }
    }
    if pos != bytes.len() {
        return Err(fmt_err("trailing bytes"));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| DyeError::Load { path: path.into(), msg: e.to_string() })
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| DyeError::Load { path: path.into(), msg: e.to_string() })?;
    decode(&bytes)
}
