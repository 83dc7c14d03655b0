//! Candidate object boxes per frame.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DyeError, Result};
use crate::features::Frame;
use crate::mask::BBox;
use crate::sequence::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    FrameDiff,
    GtJitter,
    ExhaustiveGrid,
}

impl FromStr for ProposalMode {
    type Err = DyeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame-diff" => Ok(ProposalMode::FrameDiff),
            "gt-jitter" => Ok(ProposalMode::GtJitter),
            "exhaustive-grid" => Ok(ProposalMode::ExhaustiveGrid),
            _ => Err(DyeError::Config(format!("unknown proposal mode `{s}`"))),
        }
    }
}

impl ProposalMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProposalMode::FrameDiff => "frame-diff",
            ProposalMode::GtJitter => "gt-jitter",
            ProposalMode::ExhaustiveGrid => "exhaustive-grid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    pub mode: ProposalMode,
    /// Per-pixel change threshold on [0, 1] intensities.
    pub diff_threshold: f32,
    /// Jitter amplitude as a fraction of box width/height.
    pub jitter_scale: f32,
    pub anchor_sizes: Vec<usize>,
    pub anchor_stride: usize,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            mode: ProposalMode::GtJitter,
            diff_threshold: 0.05,
            jitter_scale: 0.05,
            anchor_sizes: vec![16, 32],
            anchor_stride: 16,
            seed: 0,
        }
    }
}

/// Boxes for one frame. `gt` is needed only by `gt-jitter`.
pub fn propose(
    frame: &Frame,
    prev: Option<&Frame>,
    gt: Option<&LabelMap>,
    cfg: &ProposalConfig,
) -> Result<Vec<BBox>> {
    let (w, h) = (frame.width(), frame.height());
    match cfg.mode {
        ProposalMode::FrameDiff => Ok(match prev {
            Some(p) => frame_diff(frame, p, cfg.diff_threshold)?,
            None => Vec::new(),
        }),
        ProposalMode::GtJitter => {
            let gt = gt.ok_or_else(|| DyeError::contract("gt-jitter proposals need ground truth"))?;
            Ok(gt_jitter(gt, cfg.jitter_scale, cfg.seed, frame.index))
        }
        ProposalMode::ExhaustiveGrid => Ok(grid(w, h, &cfg.anchor_sizes, cfg.anchor_stride)),
    }
}

/// Boxes of 8-connected components where any channel changed by more than `threshold`.
pub fn frame_diff(frame: &Frame, prev: &Frame, threshold: f32) -> Result<Vec<BBox>> {
    let (w, h) = (frame.width(), frame.height());
    if prev.width() != w || prev.height() != h {
        return Err(DyeError::contract("frame-diff on frames of different size"));
    }
    let (a, b) = (frame.pixels.data(), prev.pixels.data());
    let changed: Vec<bool> = (0..w * h)
        .map(|i| (0..3).any(|c| (a[c * w * h + i] - b[c * w * h + i]).abs() > threshold))
        .collect();
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !changed[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if changed[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        boxes.push(BBox::new(x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32));
    }
    Ok(boxes)
}

/// Ground-truth boxes with each edge moved by up to `scale` times the box size.
pub fn gt_jitter(gt: &LabelMap, scale: f32, seed: u64, frame_index: usize) -> Vec<BBox> {
    let mut out = Vec::new();
    for id in gt.present_ids() {
        let Some(b) = gt.mask(id).bbox() else { continue };
        if scale == 0.0 {
            out.push(b);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((frame_index as u64) << 16) ^ id as u64);
        let mut j = |len: f32| rng.gen_range(-1.0f32..=1.0) * scale * len;
        let (bw, bh) = (b.width(), b.height());
        let moved = BBox::new(b.x0 + j(bw), b.y0 + j(bh), b.x1 + j(bw), b.y1 + j(bh));
        if let Some(c) = moved.clip(gt.width(), gt.height()) {
            out.push(c);
        }
    }
    out
}

/// Square anchors of every size, tiled at `stride`, fully inside the frame.
pub fn grid(w: usize, h: usize, sizes: &[usize], stride: usize) -> Vec<BBox> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for &a in sizes {
        if a == 0 || a > w || a > h {
            continue;
        }
        for y in (0..=h - a).step_by(stride) {
            for x in (0..=w - a).step_by(stride) {
                out.push(BBox::new(x as f32, y as f32, (x + a) as f32, (y + a) as f32));
            }
        }
    }
    out
}

/// Number of anchors [`grid`] produces.
pub fn grid_count(w: usize, h: usize, sizes: &[usize], stride: usize) -> usize {
    sizes
        .iter()
        .filter(|&&a| a > 0 && a <= w && a <= h)
        .map(|&a| ((w - a) / stride + 1) * ((h - a) / stride + 1))
        .sum()
}
