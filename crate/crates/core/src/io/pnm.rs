//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{DyeError, Result};

fn fmt_err(msg: impl Into<String>) -> DyeError {
    DyeError::Format { what: "pnm", msg: msg.into() }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(fmt_err("file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fmt_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(fmt_err("missing separator after maxval"));
    }
    if fields[2] != 255 {
        return Err(fmt_err(format!("maxval {} unsupported (need 255)", fields[2])));
    }
    Ok(Header { magic, width: fields[0], height: fields[1], data_start: pos + 1 })
}

fn body<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let n = h.width * h.height * channels;
    bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| fmt_err(format!("expected {n} data bytes")))
}

/// Interleaved RGB bytes.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(fmt_err("not a P6 file"));
    }
    Ok((h.width, h.height, body(bytes, &h, 3)?.to_vec()))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(fmt_err("not a P5 file"));
    }
    Ok((h.width, h.height, body(bytes, &h, 1)?.to_vec()))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}
