//! Sequence directories.
//!
//! ```text
//! <dir>/frames/00001.ppm ...
//! <dir>/masks/00001.pgm ...        optional, instance ids
//! <dir>/flow/00001_fw.dyfl ...     optional, frame i -> i+1
//! <dir>/flow/00002_bw.dyfl ...     optional, frame i -> i-1
//! <dir>/classes.txt                optional, appearance class per id
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{dyfl, pnm};
use crate::error::{DyeError, Result};
use crate::features::{Frame, FEATURE_STRIDE};
use crate::flow::FlowField;
use crate::sequence::{LabelMap, Sequence};
use crate::tensor::Tensor;

fn load_err(path: &Path, msg: impl Into<String>) -> DyeError {
    DyeError::Load { path: path.to_path_buf(), msg: msg.into() }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| load_err(path, e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| load_err(path, e.to_string()))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        DyeError::Format { msg, .. } | DyeError::Contract(msg) => load_err(path, msg),
        other => other,
    })
}

pub(crate) fn pad_up(v: usize) -> usize {
    v.div_ceil(FEATURE_STRIDE) * FEATURE_STRIDE
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("frames").join(format!("{i:05}.ppm"))
}

fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("masks").join(format!("{i:05}.pgm"))
}

fn flow_path(dir: &Path, i: usize, forward: bool) -> PathBuf {
    dir.join("flow").join(format!("{i:05}_{}.dyfl", if forward { "fw" } else { "bw" }))
}

/// Pads a `[0,1]` RGB frame with zeros to `pw x ph`.
pub(crate) fn frame_from_rgb(index: usize, w: usize, h: usize, rgb: &[u8], pw: usize, ph: usize) -> Result<Frame> {
    let mut data = vec![0.0f32; 3 * pw * ph];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * pw * ph + y * pw + x] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Frame::new(index, Tensor::new(&[3, ph, pw], data)?)
}

/// Quantizes a frame back to bytes, cropped to `w x h`.
pub fn frame_to_rgb(frame: &Frame, w: usize, h: usize) -> Vec<u8> {
    let (pw, ph) = (frame.width(), frame.height());
    let d = frame.pixels.data();
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((d[c * pw * ph + y * pw + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub(crate) fn pad_flow(f: FlowField, pw: usize, ph: usize) -> Result<FlowField> {
    let (w, h) = (f.width(), f.height());
    let mut data = vec![0.0f32; 2 * pw * ph];
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                data[c * pw * ph + y * pw + x] = f.vectors.data()[c * w * h + y * w + x];
            }
        }
    }
    Ok(FlowField { vectors: Tensor::new(&[2, ph, pw], data)?, from: f.from, to: f.to })
}

fn crop_flow(f: &FlowField, w: usize, h: usize) -> FlowField {
    let (pw, ph) = (f.width(), f.height());
    let mut data = Vec::with_capacity(2 * w * h);
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                data.push(f.vectors.data()[c * pw * ph + y * pw + x]);
            }
        }
    }
    FlowField { vectors: Tensor::new(&[2, h, w], data).expect("sized"), from: f.from, to: f.to }
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(load_err(&frames_dir, "frames directory missing"));
    }
    let mut n = 0;
    while frame_path(dir, n + 1).is_file() {
        n += 1;
    }
    if n == 0 {
        return Err(load_err(&frame_path(dir, 1), "no frames found"));
    }
    let mut raw = Vec::with_capacity(n);
    for i in 1..=n {
        let p = frame_path(dir, i);
        raw.push((p.clone(), with_path(&p, pnm::decode_ppm(&read(&p)?))?));
    }
    let (w, h) = (raw[0].1 .0, raw[0].1 .1);
    if w < 2 || h < 2 {
        return Err(load_err(&raw[0].0, "frame too small"));
    }
    let (pw, ph) = (pad_up(w).max(16), pad_up(h).max(16));
    let mut frames = Vec::with_capacity(n);
    for (i, (p, (fw, fh, rgb))) in raw.iter().enumerate() {
        if (*fw, *fh) != (w, h) {
            return Err(load_err(p, format!("size {fw}x{fh} differs from first frame {w}x{h}")));
        }
        frames.push(with_path(p, frame_from_rgb(i + 1, w, h, rgb, pw, ph))?);
    }

    let gt = if dir.join("masks").is_dir() {
        let mut maps = Vec::with_capacity(n);
        for i in 1..=n {
            let p = mask_path(dir, i);
            let (mw, mh, ids) = with_path(&p, pnm::decode_pgm(&read(&p)?))?;
            if (mw, mh) != (w, h) {
                return Err(load_err(&p, format!("mask size {mw}x{mh} differs from frames {w}x{h}")));
            }
            maps.push(LabelMap::new(w, h, ids)?.padded(pw, ph));
        }
        Some(maps)
    } else {
        None
    };

    let (flow_fw, flow_bw) = if dir.join("flow").is_dir() {
        let mut fw = Vec::with_capacity(n);
        let mut bw = Vec::with_capacity(n);
        for i in 1..=n {
            for (forward, store) in [(true, &mut fw), (false, &mut bw)] {
                let p = flow_path(dir, i, forward);
                let to = if forward { i + 1 } else { i.wrapping_sub(1) };
                store.push(if p.is_file() {
                    let f = with_path(&p, dyfl::decode(&read(&p)?, i, to))?;
                    if (f.width(), f.height()) != (w, h) {
                        return Err(load_err(&p, "flow size differs from frames"));
                    }
                    Some(pad_flow(f, pw, ph)?)
                } else {
                    None
                });
            }
        }
        (Some(fw), Some(bw))
    } else {
        (None, None)
    };

    let classes_path = dir.join("classes.txt");
    let classes = if classes_path.is_file() {
        let text = fs::read_to_string(&classes_path).map_err(|e| load_err(&classes_path, e.to_string()))?;
        Some(
            text.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| load_err(&classes_path, format!("bad class `{t}`"))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let seq = Sequence { name, frames, gt, flow_fw, flow_bw, original_size: (w, h), classes };
    if let Err(DyeError::Contract(msg)) = seq.validate() {
        return Err(load_err(&dir.join("masks"), msg));
    }
    Ok(seq)
}

/// Writes a sequence cropped to its original size.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let (w, h) = seq.original_size;
    for sub in ["frames", "masks", "flow"] {
        let p = dir.join(sub);
        let wanted = match sub {
            "frames" => true,
            "masks" => seq.gt.is_some(),
            _ => seq.flow_fw.is_some() || seq.flow_bw.is_some(),
        };
        if wanted {
            fs::create_dir_all(&p).map_err(|e| load_err(&p, e.to_string()))?;
        }
    }
    for (i, f) in seq.frames.iter().enumerate() {
        write(&frame_path(dir, i + 1), &pnm::encode_ppm(w, h, &frame_to_rgb(f, w, h)))?;
    }
    if let Some(gt) = &seq.gt {
        for (i, l) in gt.iter().enumerate() {
            write(&mask_path(dir, i + 1), &pnm::encode_pgm(w, h, l.crop(w, h).ids()))?;
        }
    }
    for (forward, store) in [(true, &seq.flow_fw), (false, &seq.flow_bw)] {
        for (i, f) in store.iter().flatten().enumerate() {
            if let Some(f) = f {
                write(&flow_path(dir, i + 1, forward), &dyfl::encode(&crop_flow(f, w, h)))?;
            }
        }
    }
    if let Some(classes) = &seq.classes {
        let text: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        write(&dir.join("classes.txt"), (text.join("\n") + "\n").as_bytes())?;
    }
    Ok(())
}

/// Writes label maps as `dir/%05d.pgm`, cropped to `size`.
pub fn save_labels(labels: &[LabelMap], size: (usize, usize), dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| load_err(dir, e.to_string()))?;
    let (w, h) = size;
    for (i, l) in labels.iter().enumerate() {
        write(&dir.join(format!("{:05}.pgm", i + 1)), &pnm::encode_pgm(w, h, l.crop(w, h).ids()))?;
    }
    Ok(())
}

/// Reads `dir/00001.pgm`, `dir/00002.pgm`, ... until the first gap.
pub fn load_labels(dir: &Path) -> Result<Vec<LabelMap>> {
    if !dir.is_dir() {
        return Err(load_err(dir, "label directory missing"));
    }
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("{:05}.pgm", out.len() + 1));
        if !p.is_file() {
            break;
        }
        let (w, h, ids) = with_path(&p, pnm::decode_pgm(&read(&p)?))?;
        out.push(with_path(&p, LabelMap::new(w, h, ids))?);
    }
    Ok(out)
}

/// One sequence if `dir` holds `frames/`, otherwise every sequence subdirectory in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    if dir.join("frames").is_dir() {
        return Ok(vec![load_sequence(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| load_err(dir, e.to_string()))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(load_err(dir, "no sequence directories found"));
    }
    subdirs.iter().map(|p| load_sequence(p)).collect()
}
