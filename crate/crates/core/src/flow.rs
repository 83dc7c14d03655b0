//! Dense optical flow between adjacent frames and flow-guided warping.
//!
//! Warping is backward: to bring a quantity from frame `a` into frame `b`
//! the field `F_{b->a}` is sampled at every pixel `p` of `b` and the source
//! is read bilinearly at `p + F_{b->a}(p)`.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::error::{DyeError, Result};
use crate::features::Frame;
use crate::kernels::{self, Real};
use crate::mask::{BBox, Mask};
use crate::sequence::Sequence;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pixel `(dx, dy)` displacement from `from` to `to` (1-based frames),
/// stored as a 2xHxW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Tensor,
    pub from: usize,
    pub to: usize,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize, from: usize, to: usize) -> Self {
        FlowField { vectors: Tensor::zeros(&[2, h, w]), from, to }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32, from: usize, to: usize) -> Self {
        let plane = h * w;
        let vectors = Tensor::from_fn(&[2, h, w], |i| if i < plane { dx } else { dy });
        FlowField { vectors, from, to }
    }

    pub fn height(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[2]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let w = self.width();
        let plane = w * self.height();
        let d = self.vectors.data();
        (d[y * w + x], d[plane + y * w + x])
    }

    /// Bilinear flow value at a continuous index-coordinate point.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let (h, w) = (self.height(), self.width());
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let t = kernels::bilinear_taps(h, w, x, y);
        let d = self.vectors.data();
        let plane = h * w;
        let (mut fx, mut fy) = (0.0, 0.0);
        for k in 0..4 {
            if let Some(i) = t.idx[k] {
                fx += t.wgt[k] * d[i] as f64;
                fy += t.wgt[k] * d[plane + i] as f64;
            }
        }
        (fx, fy)
    }

    /// Source points `p + F(p)` for every pixel, row-major.
    pub fn source_points(&self) -> Vec<(f64, f64)> {
        let (h, w) = (self.height(), self.width());
        let mut pts = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = self.at(x, y);
                pts.push((x as f64 + dx as f64, y as f64 + dy as f64));
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowMode {
    GroundTruth,
    BlockMatch,
    Zero,
}

impl FromStr for FlowMode {
    type Err = DyeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(FlowMode::GroundTruth),
            "block-match" => Ok(FlowMode::BlockMatch),
            "zero" => Ok(FlowMode::Zero),
            _ => Err(DyeError::Config(format!("unknown flow mode `{s}`"))),
        }
    }
}

impl FlowMode {
    pub fn name(&self) -> &'static str {
        match self {
            FlowMode::GroundTruth => "ground-truth",
            FlowMode::BlockMatch => "block-match",
            FlowMode::Zero => "zero",
        }
    }
}

/// Flow `F_{from->to}` between adjacent 1-based frames.
pub fn get_flow(seq: &Sequence, from: usize, to: usize, mode: FlowMode) -> Result<FlowField> {
    if from.abs_diff(to) != 1 {
        return Err(DyeError::contract(format!("flow requested between non-adjacent frames {from} and {to}")));
    }
    let src = seq.frame(from)?;
    let dst = seq.frame(to)?;
    match mode {
        FlowMode::Zero => Ok(FlowField::zeros(src.height(), src.width(), from, to)),
        FlowMode::BlockMatch => Ok(block_match(src, dst)),
        FlowMode::GroundTruth => {
            let store = if to > from { &seq.flow_fw } else { &seq.flow_bw };
            store
                .as_ref()
                .and_then(|v| v.get(from - 1).cloned().flatten())
                .ok_or_else(|| DyeError::MissingData(format!("no ground-truth flow {from}->{to} in `{}`", seq.name)))
        }
    }
}

/// Memoizing flow source for one sequence.
#[derive(Debug)]
pub struct FlowProvider {
    mode: FlowMode,
    cache: Mutex<HashMap<(usize, usize), Arc<FlowField>>>,
}

impl FlowProvider {
    pub fn new(mode: FlowMode) -> Self {
        FlowProvider { mode, cache: Mutex::new(HashMap::new()) }
    }

    pub fn mode(&self) -> FlowMode {
        self.mode
    }

    pub fn get(&self, seq: &Sequence, from: usize, to: usize) -> Result<Arc<FlowField>> {
        if let Some(f) = self.cache.lock().expect("flow lock").get(&(from, to)) {
            return Ok(Arc::clone(f));
        }
        let f = Arc::new(get_flow(seq, from, to, self.mode)?);
        self.cache.lock().expect("flow lock").insert((from, to), Arc::clone(&f));
        Ok(f)
    }
}

pub const BLOCK_SIZE: usize = 8;
pub const SEARCH_RADIUS: isize = 8;

/// Integer block matching: for every 8x8 block of `src`, the displacement
/// within radius 8 minimizing the sum of absolute differences against
/// `dst`. Ties go to the smallest squared displacement, then to the
/// lexicographically smallest `(dx, dy)`. Candidates leaving `dst` are not
/// considered.
pub fn block_match(src: &Frame, dst: &Frame) -> FlowField {
    let (h, w) = (src.height(), src.width());
    let a = src.pixels.data();
    let b = dst.pixels.data();
    let plane = h * w;
    let mut flow = FlowField::zeros(h, w, src.index, dst.index);
    for by in (0..h).step_by(BLOCK_SIZE) {
        for bx in (0..w).step_by(BLOCK_SIZE) {
            let bh = BLOCK_SIZE.min(h - by);
            let bw = BLOCK_SIZE.min(w - bx);
            let mut best: Option<(f64, isize, isize, isize)> = None;
            for dy in -SEARCH_RADIUS..=SEARCH_RADIUS {
                for dx in -SEARCH_RADIUS..=SEARCH_RADIUS {
                    let (tx, ty) = (bx as isize + dx, by as isize + dy);
                    if tx < 0 || ty < 0 || tx as usize + bw > w || ty as usize + bh > h {
                        continue;
                    }
                    let mut sad = 0.0f64;
                    for c in 0..3 {
                        for y in 0..bh {
                            let ra = c * plane + (by + y) * w + bx;
                            let rb = c * plane + (ty as usize + y) * w + tx as usize;
                            for x in 0..bw {
                                sad += (a[ra + x] - b[rb + x]).abs() as f64;
                            }
                        }
                    }
                    let cand = (sad, dx * dx + dy * dy, dx, dy);
                    let better = match best {
                        None => true,
                        Some(bst) => {
                            (cand.0, cand.1, cand.2, cand.3).partial_cmp(&(bst.0, bst.1, bst.2, bst.3))
                                == Some(std::cmp::Ordering::Less)
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, dx, dy) = best.expect("zero displacement is always in range");
            let d = flow.vectors.data_mut();
            for y in by..by + bh {
                for x in bx..bx + bw {
                    d[y * w + x] = dx as f32;
                    d[plane + y * w + x] = dy as f32;
                }
            }
        }
    }
    flow
}

/// Backward warp of a CxHxW map: `out(p) = map(p + flow_reverse(p))`,
/// zero outside the map.
pub fn warp(map: &Tensor, flow_reverse: &FlowField) -> Result<Tensor> {
    let (c, h, w) = map.chw()?;
    if (flow_reverse.height(), flow_reverse.width()) != (h, w) {
        return Err(DyeError::contract("flow size differs from map size"));
    }
    let out = kernels::sample_forward(map.data(), c, h, w, &flow_reverse.source_points());
    Tensor::new(&[c, h, w], out)
}

/// Differentiable warp recorded on a tape.
pub fn warp_var<T: Real>(tape: &mut Tape<T>, map: Var, flow_reverse: &FlowField) -> Result<Var> {
    let [_, h, w] = tape.shape(map)[..] else { return Err(DyeError::contract("warp expects CxHxW")) };
    if (flow_reverse.height(), flow_reverse.width()) != (h, w) {
        return Err(DyeError::contract("flow size differs from map size"));
    }
    tape.sample(map, Arc::new(flow_reverse.source_points()), h, w)
}

/// Warps a binary mask and re-binarizes at 0.5.
pub fn warp_mask(mask: &Mask, flow_reverse: &FlowField) -> Result<Mask> {
    let t = Tensor::new(&[1, mask.height(), mask.width()], mask.as_f32())?;
    let out = warp(&t, flow_reverse)?;
    Mask::from_bits(mask.width(), mask.height(), out.data().iter().map(|&v| (v >= 0.5) as u8).collect())
}

/// Area-mean downsampling of a flow field by `factor`, with vectors divided
/// by `factor`, for warping maps that live at reduced resolution.
pub fn downsample_flow(flow: &FlowField, factor: usize) -> Result<FlowField> {
    let (h, w) = (flow.height(), flow.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(DyeError::contract("flow size must be divisible by the downsampling factor"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = FlowField::zeros(oh, ow, flow.from, flow.to);
    let norm = (factor * factor) as f64 * factor as f64;
    for y in 0..oh {
        for x in 0..ow {
            let (mut sx, mut sy) = (0f64, 0f64);
            for yy in y * factor..(y + 1) * factor {
                for xx in x * factor..(x + 1) * factor {
                    let (dx, dy) = flow.at(xx, yy);
                    sx += dx as f64;
                    sy += dy as f64;
                }
            }
            let d = out.vectors.data_mut();
            d[y * ow + x] = (sx / norm) as f32;
            d[oh * ow + y * ow + x] = (sy / norm) as f32;
        }
    }
    Ok(out)
}

/// Sampling points that carry an `m x m` roi grid over `prev_box` (in the
/// source frame) to the grid over `cur_box` (in the target frame): each
/// target cell centre is displaced by the reverse flow and expressed in
/// the source grid's index coordinates.
pub fn roi_warp_points(flow_reverse: &FlowField, cur_box: &BBox, prev_box: &BBox, m: usize) -> Vec<(f64, f64)> {
    let pcw = prev_box.width() as f64 / m as f64;
    let pch = prev_box.height() as f64 / m as f64;
    cur_box
        .cell_centers(m)
        .into_iter()
        .map(|(x, y)| {
            // pixel (i, j) is centred at (i + 0.5, j + 0.5) in continuous coordinates
            let (fx, fy) = flow_reverse.sample(x - 0.5, y - 0.5);
            let (qx, qy) = (x + fx, y + fy);
            ((qx - prev_box.x0 as f64) / pcw - 0.5, (qy - prev_box.y0 as f64) / pch - 0.5)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, shift: isize, index: usize) -> Frame {
        let hash = |x: isize, y: isize| {
            let v = (x.wrapping_mul(73856093) ^ y.wrapping_mul(19349663)) as u64;
            ((v.wrapping_mul(2654435761) >> 7) % 255) as f32 / 255.0
        };
        let plane = h * w;
        let t = Tensor::from_fn(&[3, h, w], |i| {
            let c = i / plane;
            let (y, x) = ((i % plane) / w, (i % plane) % w);
            hash(x as isize - shift + c as isize * 1000, y as isize)
        });
        Frame::new(index, t).unwrap()
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let map = Tensor::from_fn(&[3, 8, 8], |i| (i as f32).sqrt());
        let out = warp(&map, &FlowField::zeros(8, 8, 2, 1)).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn integer_shift() {
        let map = Tensor::from_fn(&[1, 4, 4], |i| i as f32 + 1.0);
        let out = warp(&map, &FlowField::constant(4, 4, -1.0, 0.0, 2, 1)).unwrap();
        for y in 0..4 {
            assert_eq!(out.at3(0, y, 0), 0.0);
            for x in 1..4 {
                assert_eq!(out.at3(0, y, x), map.at3(0, y, x - 1));
            }
        }
    }

    #[test]
    fn half_pixel_on_linear_field() {
        let map = Tensor::from_fn(&[1, 6, 6], |i| 1.5 * (i % 6) as f32 - 0.5 * (i / 6) as f32 + 2.0);
        let out = warp(&map, &FlowField::constant(6, 6, 0.5, -0.5, 2, 1)).unwrap();
        for y in 1..5 {
            for x in 0..5 {
                let expect = 1.5 * (x as f64 + 0.5) - 0.5 * (y as f64 - 0.5) + 2.0;
                assert!((out.at3(0, y, x) as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn subpixel_mass_preserved() {
        let mask = Mask::from_fn(32, 32, |x, y| (10..20).contains(&x) && (8..22).contains(&y));
        let t = Tensor::new(&[1, 32, 32], mask.as_f32()).unwrap();
        let out = warp(&t, &FlowField::constant(32, 32, 0.3, -0.7, 2, 1)).unwrap();
        let mass: f32 = out.data().iter().sum();
        assert!((mass - mask.area() as f32).abs() / (mask.area() as f32) < 0.01);
    }

    #[test]
    fn block_match_recovers_translation() {
        let a = textured(32, 48, 0, 1);
        let b = textured(32, 48, 2, 2);
        let f = block_match(&a, &b);
        for y in 0..32 {
            // the rightmost column of blocks cannot move right by 2 inside the frame
            for x in 0..40 {
                assert_eq!(f.at(x, y), (2.0, 0.0), "at ({x},{y})");
            }
        }
    }

    #[test]
    fn block_match_tie_prefers_zero() {
        let a = Frame::new(1, Tensor::filled(&[3, 16, 16], 0.5)).unwrap();
        let f = block_match(&a, &a.clone());
        assert!(f.vectors.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_averages_and_scales() {
        let f = FlowField::constant(16, 16, 8.0, -4.0, 1, 2);
        let d = downsample_flow(&f, 8).unwrap();
        assert_eq!(d.height(), 2);
        assert_eq!(d.at(1, 1), (1.0, -0.5));
        assert!(downsample_flow(&FlowField::zeros(12, 16, 1, 2), 8).is_err());
    }

    #[test]
    fn roi_warp_points_identity_for_same_box_and_zero_flow() {
        let b = BBox::new(3.0, 5.0, 19.0, 21.0);
        let pts = roi_warp_points(&FlowField::zeros(32, 32, 2, 1), &b, &b, 4);
        for (i, (x, y)) in pts.into_iter().enumerate() {
            assert!((x - (i % 4) as f64).abs() < 1e-9 && (y - (i / 4) as f64).abs() < 1e-9);
        }
    }
}
