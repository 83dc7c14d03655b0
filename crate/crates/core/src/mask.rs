//! Binary masks, boxes, and conversions between frame and roi grids.

use crate::error::{DyeError, Result};
use crate::kernels;

/// Axis-aligned box in continuous frame coordinates; pixel `(x, y)` covers
/// `[x, x+1) x [y, y+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    /// Intersection with `[0, w] x [0, h]`, or `None` if degenerate.
    pub fn clip(&self, w: usize, h: usize) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.clamp(0.0, w as f32),
            y0: self.y0.clamp(0.0, h as f32),
            x1: self.x1.clamp(0.0, w as f32),
            y1: self.y1.clamp(0.0, h as f32),
        };
        b.is_valid().then_some(b)
    }

    /// Grows every side by `margin` times the diagonal.
    pub fn dilate(&self, margin: f32) -> BBox {
        let d = (self.width().powi(2) + self.height().powi(2)).sqrt() * margin;
        BBox { x0: self.x0 - d, y0: self.y0 - d, x1: self.x1 + d, y1: self.y1 + d }
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 { inter / union } else { 0.0 }
    }

    /// Frame-coordinate centres of an `m x m` grid of cells over the box.
    pub fn cell_centers(&self, m: usize) -> Vec<(f64, f64)> {
        let cw = self.width() as f64 / m as f64;
        let ch = self.height() as f64 / m as f64;
        let mut pts = Vec::with_capacity(m * m);
        for v in 0..m {
            for u in 0..m {
                pts.push((self.x0 as f64 + (u as f64 + 0.5) * cw, self.y0 as f64 + (v as f64 + 0.5) * ch));
            }
        }
        pts
    }
}

/// Binary HxW mask, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    pub fn from_bits(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(DyeError::contract("mask data length mismatch"));
        }
        Ok(Mask { width, height, data: data.into_iter().map(|v| (v != 0) as u8).collect() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    /// Out-of-frame coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Tight bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32))
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a != 0 && **b != 0).count()
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &Mask) -> f32 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 { 1.0 } else { inter as f32 / union as f32 }
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Crops the top-left `w x h` region.
    pub fn crop(&self, w: usize, h: usize) -> Mask {
        Mask::from_fn(w.min(self.width), h.min(self.height), |x, y| self.get(x, y))
    }

    /// Fraction of each cell of an `m x m` grid over `b` covered by the mask,
    /// estimated on a 4x4 sub-grid per cell.
    pub fn roi_target(&self, b: &BBox, m: usize) -> Vec<f64> {
        const SUB: usize = 4;
        let cw = b.width() as f64 / m as f64;
        let ch = b.height() as f64 / m as f64;
        let mut out = Vec::with_capacity(m * m);
        for v in 0..m {
            for u in 0..m {
                let mut hits = 0;
                for j in 0..SUB {
                    let y = b.y0 as f64 + (v as f64 + (j as f64 + 0.5) / SUB as f64) * ch;
                    for i in 0..SUB {
                        let x = b.x0 as f64 + (u as f64 + (i as f64 + 0.5) / SUB as f64) * cw;
                        hits += self.get_signed(x.floor() as isize, y.floor() as isize) as usize;
                    }
                }
                out.push(hits as f64 / (SUB * SUB) as f64);
            }
        }
        out
    }
}

/// Resizes an `m x m` probability map bilinearly into `b` at frame
/// resolution and thresholds at 0.5. Pixels outside the box are background.
///
/// Grid values are clamped at the grid edges so the map fills the whole box.
pub fn paste_back(probs: &[f32], m: usize, b: &BBox, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    let Some(clipped) = b.clip(width, height) else { return mask };
    let cw = b.width() as f64 / m as f64;
    let ch = b.height() as f64 / m as f64;
    let xs = clipped.x0.floor() as usize..(clipped.x1.ceil() as usize).min(width);
    let ys = clipped.y0.floor() as usize..(clipped.y1.ceil() as usize).min(height);
    let last = (m - 1) as f64;
    for y in ys {
        let cy = y as f64 + 0.5;
        if cy < b.y0 as f64 || cy >= b.y1 as f64 {
            continue;
        }
        let gy = ((cy - b.y0 as f64) / ch - 0.5).clamp(0.0, last);
        for x in xs.clone() {
            let cx = x as f64 + 0.5;
            if cx < b.x0 as f64 || cx >= b.x1 as f64 {
                continue;
            }
            let gx = ((cx - b.x0 as f64) / cw - 0.5).clamp(0.0, last);
            let t = kernels::bilinear_taps(m, m, gx, gy);
            let mut v = 0.0;
            for k in 0..4 {
                if let Some(i) = t.idx[k] {
                    v += t.wgt[k] * probs[i] as f64;
                }
            }
            if v > 0.5 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}
