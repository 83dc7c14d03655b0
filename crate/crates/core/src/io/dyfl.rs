//! Flow files: `DYFL`, u32 version, u32 width, u32 height, then the dx
//! plane and the dy plane as little-endian f32, row-major.

use crate::error::{DyeError, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DYFL";
const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> DyeError {
    DyeError::Format { what: "flow file", msg: msg.into() }
}

pub fn encode(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + flow.vectors.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, flow.width() as u32, flow.height() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in flow.vectors.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let v = u32::from_le_bytes(bytes.get(*pos..*pos + 4)?.try_into().ok()?);
    *pos += 4;
    Some(v)
}

/// Decodes a field; `from`/`to` come from the file name.
pub fn decode(bytes: &[u8], from: usize, to: usize) -> Result<FlowField> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(fmt_err("bad magic"));
    }
    let mut pos = 4;
    let mut next = || read_u32(bytes, &mut pos).ok_or_else(|| fmt_err("truncated header"));
    let (version, w, h) = (next()?, next()? as usize, next()? as usize);
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let n = 2 * w * h;
    let raw = bytes.get(16..16 + n * 4).ok_or_else(|| fmt_err(format!("expected {n} values")))?;
    if bytes.len() != 16 + n * 4 {
        return Err(fmt_err("trailing bytes"));
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(FlowField { vectors: Tensor::new(&[2, h, w], data)?, from, to })
}
