//! Synthetic moving-shape clips with exact masks and flow.
//!
//! Shapes are hard-edged rectangles or discs over a static block-textured
//! background. A pixel belongs to a shape when its centre lies inside it.
//! Textures are defined in shape-local coordinates, so integer motion moves
//! them exactly. Draw order is list order; later shapes cover earlier ones.
//! Unannotated shapes ("props") occlude but never appear in the masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DyeError, Result};
use crate::flow::FlowField;
use crate::io::seqdir::{frame_from_rgb, pad_flow, pad_up};
use crate::sequence::{LabelMap, Sequence};

/// Number of distinct appearance classes.
pub const NUM_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect { w: f32, h: f32 },
    Disc { r: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Centre at frame 1.
    pub center: (f32, f32),
    /// Centre displacement per frame.
    pub velocity: (f32, f32),
    /// Size grows by `(1 + scale_rate)` per frame.
    pub scale_rate: f32,
    pub class: usize,
    pub annotated: bool,
}

impl ShapeSpec {
    pub fn rect(w: f32, h: f32, center: (f32, f32), velocity: (f32, f32), class: usize) -> Self {
        ShapeSpec { kind: ShapeKind::Rect { w, h }, center, velocity, scale_rate: 0.0, class, annotated: true }
    }

    pub fn disc(r: f32, center: (f32, f32), velocity: (f32, f32), class: usize) -> Self {
        ShapeSpec { kind: ShapeKind::Disc { r }, center, velocity, scale_rate: 0.0, class, annotated: true }
    }

    pub fn prop(mut self) -> Self {
        self.annotated = false;
        self
    }

    fn center_at(&self, t: usize) -> (f64, f64) {
        let k = (t - 1) as f64;
        (self.center.0 as f64 + k * self.velocity.0 as f64, self.center.1 as f64 + k * self.velocity.1 as f64)
    }

    fn scale_at(&self, t: usize) -> f64 {
        (1.0 + self.scale_rate as f64).powi(t as i32 - 1)
    }

    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Rect { w, h } => (w as f64, h as f64),
            ShapeKind::Disc { r } => (2.0 * r as f64, 2.0 * r as f64),
        }
    }

    /// Local coordinates (origin at the top-left of the unscaled extent) if inside.
    fn local(&self, t: usize, px: f64, py: f64) -> Option<(f64, f64)> {
        let (cx, cy) = self.center_at(t);
        let s = self.scale_at(t);
        let (ux, uy) = ((px - cx) / s, (py - cy) / s);
        let inside = match self.kind {
            ShapeKind::Rect { w, h } => {
                let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
                ux >= -hw && ux < hw && uy >= -hh && uy < hh
            }
            ShapeKind::Disc { r } => ux * ux + uy * uy < (r as f64) * (r as f64),
        };
        let (ew, eh) = self.extent();
        inside.then_some((ux + ew / 2.0, uy + eh / 2.0))
    }

    /// Motion of a point on the shape at `p` from frame `t` to frame `u`.
    fn displacement(&self, t: usize, u: usize, px: f64, py: f64) -> (f64, f64) {
        let (c0, c1) = (self.center_at(t), self.center_at(u));
        let ratio = self.scale_at(u) / self.scale_at(t);
        (c1.0 - c0.0 + (px - c0.0) * (ratio - 1.0), c1.1 - c0.1 + (py - c0.1) * (ratio - 1.0))
    }
}

/// Hides `occluded` behind `occluder` on frames `first..=last`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occlusion {
    /// Shape indices into [`SynthSpec::shapes`].
    pub occluder: usize,
    pub occluded: usize,
    pub first: usize,
    pub last: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub shapes: Vec<ShapeSpec>,
    pub occlusions: Vec<Occlusion>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DyeError::Spec(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("frame {}x{} smaller than 16x16", self.width, self.height));
        }
        if self.frames == 0 {
            return bad("zero frames".into());
        }
        if self.shapes.iter().filter(|s| s.annotated).count() > 255 {
            return bad("more than 255 annotated shapes".into());
        }
        for (i, s) in self.shapes.iter().enumerate() {
            let (ew, eh) = s.extent();
            let grow = s.scale_at(1).max(s.scale_at(self.frames));
            if ew <= 0.0 || eh <= 0.0 {
                return bad(format!("shape {i} has non-positive size"));
            }
            if ew * grow > self.width as f64 || eh * grow > self.height as f64 {
                return bad(format!("shape {i} ({ew}x{eh}) larger than the {}x{} frame", self.width, self.height));
            }
            if s.class >= NUM_CLASSES {
                return bad(format!("shape {i} class {} outside 0..{NUM_CLASSES}", s.class));
            }
        }
        for o in &self.occlusions {
            if o.first == 0 || o.last < o.first || o.last > self.frames {
                return bad(format!("occlusion frames {}..={} outside 1..={}", o.first, o.last, self.frames));
            }
            if o.occluder >= self.shapes.len() || o.occluded >= self.shapes.len() || o.occluder == o.occluded {
                return bad("occlusion refers to an unknown shape".into());
            }
        }
        Ok(())
    }

    fn hidden(&self, shape: usize, t: usize) -> bool {
        self.occlusions.iter().any(|o| o.occluded == shape && (o.first..=o.last).contains(&t))
    }

    /// Topmost visible shape covering pixel `(x, y)` at frame `t`.
    fn top(&self, t: usize, x: usize, y: usize) -> Option<(usize, (f64, f64))> {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        (0..self.shapes.len()).rev().find_map(|i| {
            if self.hidden(i, t) {
                return None;
            }
            self.shapes[i].local(t, px, py).map(|l| (i, l))
        })
    }
}

const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [220, 60, 50],
    [60, 200, 80],
    [60, 90, 230],
    [235, 210, 60],
    [210, 70, 200],
    [70, 210, 215],
    [240, 140, 40],
    [235, 235, 235],
];

fn shade(c: [u8; 3], f: f32) -> [u8; 3] {
    c.map(|v| (v as f32 * f).round().clamp(0.0, 255.0) as u8)
}

fn texture(class: usize, prop: bool, lx: f64, ly: f64) -> [u8; 3] {
    let (ix, iy) = (lx.floor() as i64, ly.floor() as i64);
    if prop {
        let on = (ix + iy).rem_euclid(6) < 3;
        return if on { [150, 150, 160] } else { [110, 110, 120] };
    }
    let base = PALETTE[class];
    let on = match class % 4 {
        0 => true,
        1 => ix.rem_euclid(4) < 2,
        2 => iy.rem_euclid(4) < 2,
        _ => (ix.div_euclid(4) + iy.div_euclid(4)) % 2 == 0,
    };
    shade(base, if on { 1.0 } else { 0.7 })
}

fn background(seed: u64, w: usize, h: usize) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0b0);
    let (bw, bh) = (w.div_ceil(4), h.div_ceil(4));
    let blocks: Vec<[u8; 3]> = (0..bw * bh)
        .map(|_| {
            let g = rng.gen_range(40u8..=100);
            [g, g.saturating_add(rng.gen_range(0..8)), g.saturating_add(rng.gen_range(0..12))]
        })
        .collect();
    (0..w * h).map(|i| blocks[(i / w / 4) * bw + (i % w) / 4]).collect()
}

/// Unpadded rendering of one frame: RGB bytes and instance ids.
fn render(spec: &SynthSpec, bg: &[[u8; 3]], ids: &[u8], t: usize) -> (Vec<u8>, Vec<u8>) {
    let (w, h) = (spec.width, spec.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = match spec.top(t, x, y) {
                Some((i, (lx, ly))) => {
                    let s = &spec.shapes[i];
                    labels[y * w + x] = ids[i];
                    texture(s.class, !s.annotated, lx, ly)
                }
                None => bg[y * w + x],
            };
            rgb.extend_from_slice(&c);
        }
    }
    (rgb, labels)
}

fn flow(spec: &SynthSpec, t: usize, u: usize) -> FlowField {
    let (w, h) = (spec.width, spec.height);
    let mut f = FlowField::zeros(h, w, t, u);
    let plane = w * h;
    for y in 0..h {
        for x in 0..w {
            if let Some((i, _)) = spec.top(t, x, y) {
                let (dx, dy) = spec.shapes[i].displacement(t, u, x as f64 + 0.5, y as f64 + 0.5);
                f.vectors.data_mut()[y * w + x] = dx as f32;
                f.vectors.data_mut()[plane + y * w + x] = dy as f32;
            }
        }
    }
    f
}

/// Renders a clip in memory (frames padded to multiples of 8).
pub fn generate(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let (pw, ph) = (pad_up(w).max(16), pad_up(h).max(16));
    let bg = background(spec.seed, w, h);
    let mut next = 0u8;
    let ids: Vec<u8> = spec
        .shapes
        .iter()
        .map(|s| {
            if s.annotated {
                next += 1;
                next
            } else {
                0
            }
        })
        .collect();
    let n = spec.frames;
    let mut frames = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    let mut fw = Vec::with_capacity(n);
    let mut bw = Vec::with_capacity(n);
    for t in 1..=n {
        let (rgb, labels) = render(spec, &bg, &ids, t);
        frames.push(frame_from_rgb(t, w, h, &rgb, pw, ph)?);
        gt.push(LabelMap::new(w, h, labels)?.padded(pw, ph));
        fw.push(if t < n { Some(pad_flow(flow(spec, t, t + 1), pw, ph)?) } else { None });
        bw.push(if t > 1 { Some(pad_flow(flow(spec, t, t - 1), pw, ph)?) } else { None });
    }
    let classes = spec.shapes.iter().filter(|s| s.annotated).map(|s| s.class).collect();
    Ok(Sequence {
        name: spec.name.clone(),
        frames,
        gt: Some(gt),
        flow_fw: Some(fw),
        flow_bw: Some(bw),
        original_size: (w, h),
        classes: Some(classes),
    })
}

/// Renders a clip and writes it as a sequence directory.
pub fn gen_synthetic(spec: &SynthSpec, dir: &Path) -> Result<Sequence> {
    let seq = generate(spec)?;
    crate::io::save_sequence(&seq, dir)?;
    Ok(seq)
}

/// 64x64, 16 frames, two objects. A fast unannotated bar sweeps across
/// object 2 and covers it completely on frames 7 to 10; the relative speed
/// equals the object width, so frames 6 and 11 show it whole. Object 1
/// moves freely above the bar's path.
pub fn occlusion_clip(seed: u64) -> SynthSpec {
    SynthSpec {
        name: "occlusion".into(),
        width: 64,
        height: 64,
        frames: 16,
        shapes: vec![
            ShapeSpec::rect(16.0, 16.0, (16.0, 12.0), (1.5, 0.5), 0),
            ShapeSpec::rect(16.0, 16.0, (32.0, 40.0), (1.0, 0.0), 1),
            ShapeSpec::rect(64.0, 24.0, (-88.0, 40.0), (17.0, 0.0), 0).prop(),
        ],
        occlusions: vec![Occlusion { occluder: 2, occluded: 1, first: 7, last: 10 }],
        seed,
    }
}

/// Two objects translating without contact.
pub fn easy_clip(seed: u64, frames: usize) -> SynthSpec {
    SynthSpec {
        name: "easy".into(),
        width: 64,
        height: 64,
        frames,
        shapes: vec![
            ShapeSpec::rect(16.0, 16.0, (16.0, 16.0), (1.0, 0.5), 2),
            ShapeSpec::disc(9.0, (44.0, 44.0), (-1.0, -0.5), 3),
        ],
        occlusions: vec![],
        seed,
    }
}

/// Two squares of the same solid colour side by side, 8 frames. Object 2 is
/// drawn on top and outruns object 1, which starts touching or under it, so
/// each sits inside the other's box margin and only motion history tells
/// them apart.
pub fn two_blob_spec(rng: &mut impl Rng, index: usize) -> SynthSpec {
    let class = 0;
    let s = rng.gen_range(12.0..16.0f32);
    let gap = rng.gen_range(-6.0..2.0f32);
    let y = rng.gen_range(20.0..44.0f32);
    let vx = rng.gen_range(1.0..2.5f32);
    let target = ShapeSpec::rect(s, s, (12.0, y), (vx, rng.gen_range(-0.3..0.3)), class);
    let distractor =
        ShapeSpec::rect(s, s, (12.0 + s + gap, y + rng.gen_range(-4.0..4.0)), (vx * rng.gen_range(0.3..0.8), 0.0), class);
    SynthSpec {
        name: format!("blob{index:03}"),
        width: 64,
        height: 64,
        frames: 8,
        shapes: vec![distractor, target],
        occlusions: vec![],
        seed: rng.gen(),
    }
}

/// Random training clip: one to three annotated shapes of distinct classes,
/// sometimes crossed by a prop bar.
pub fn random_spec(rng: &mut impl Rng, width: usize, height: usize, frames: usize) -> SynthSpec {
    let k = rng.gen_range(1..=3);
    let mut classes: Vec<usize> = (0..NUM_CLASSES).collect();
    for i in 0..k {
        let j = rng.gen_range(i..NUM_CLASSES);
        classes.swap(i, j);
    }
    let mut shapes = Vec::new();
    let (wf, hf) = (width as f32, height as f32);
    let cap = 0.6 * wf.min(hf);
    for &class in &classes[..k] {
        let (sw, sh) = (rng.gen_range(12.0..22.0f32).min(cap), rng.gen_range(12.0..22.0f32).min(cap));
        let center = (rng.gen_range(sw / 2.0..=wf - sw / 2.0), rng.gen_range(sh / 2.0..=hf - sh / 2.0));
        let velocity = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
        let mut s = if rng.gen_bool(0.5) {
            ShapeSpec::rect(sw, sh, center, velocity, class)
        } else {
            ShapeSpec::disc(sw / 2.0, center, velocity, class)
        };
        if rng.gen_bool(0.2) {
            s.scale_rate = rng.gen_range(-0.02..0.02f32);
        }
        shapes.push(s);
    }
    if rng.gen_bool(0.4) {
        let bh = cap.min(24.0);
        let bw = rng.gen_range(16.0..40.0f32).min(wf);
        let y = rng.gen_range(bh / 2.0..=hf - bh / 2.0);
        let v = rng.gen_range(5.0..17.0f32);
        let x0 = -bw / 2.0 - rng.gen_range(0.0..v * frames as f32 / 2.0);
        shapes.push(ShapeSpec::rect(bw, bh, (x0, y), (v, 0.0), 0).prop());
    }
    SynthSpec {
        name: "random".into(),
        width,
        height,
        frames,
        shapes,
        occlusions: vec![],
        seed: rng.gen(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp;

    fn square_clip() -> SynthSpec {
        SynthSpec {
            name: "sq".into(),
            width: 32,
            height: 32,
            frames: 4,
            shapes: vec![ShapeSpec::rect(8.0, 8.0, (10.0, 12.0), (2.0, 0.0), 1)],
            occlusions: vec![],
            seed: 3,
        }
    }

    #[test]
    fn forward_flow_is_velocity_on_support() {
        let seq = generate(&square_clip()).unwrap();
        let f = seq.flow_fw.as_ref().unwrap()[0].as_ref().unwrap();
        let m = seq.gt_mask(1, 1).unwrap();
        assert_eq!(m.area(), 64);
        for y in 0..32 {
            for x in 0..32 {
                let expect = if m.get(x, y) { (2.0, 0.0) } else { (0.0, 0.0) };
                assert_eq!(f.at(x, y), expect);
            }
        }
    }

    #[test]
    fn reverse_flow_warp_reproduces_next_frame() {
        let seq = generate(&square_clip()).unwrap();
        for j in 2..=4 {
            let bw = seq.flow_bw.as_ref().unwrap()[j - 1].as_ref().unwrap();
            let warped = warp(&seq.frame(j - 1).unwrap().pixels, bw).unwrap();
            let target = &seq.frame(j).unwrap().pixels;
            let prev_mask = seq.gt_mask(j - 1, 1).unwrap();
            let cur_mask = seq.gt_mask(j, 1).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    // pixels uncovered by the moving square have no source
                    if prev_mask.get(x, y) && !cur_mask.get(x, y) {
                        continue;
                    }
                    for c in 0..3 {
                        assert_eq!(warped.at3(c, y, x), target.at3(c, y, x), "frame {j} ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn scripted_occlusion_empties_mask_exactly() {
        let seq = generate(&occlusion_clip(1)).unwrap();
        for t in 1..=16 {
            let a = seq.gt_mask(t, 2).unwrap().area();
            assert_eq!(a == 0, (7..=10).contains(&t), "frame {t} area {a}");
            assert!(seq.gt_mask(t, 1).unwrap().area() == 256);
        }
        // neighbouring frames show the object whole
        assert_eq!(seq.gt_mask(6, 2).unwrap().area(), 256);
        assert_eq!(seq.gt_mask(11, 2).unwrap().area(), 256);
    }

    #[test]
    fn same_seed_same_clip() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = generate(&random_spec(&mut r1, 64, 64, 4)).unwrap();
        let b = generate(&random_spec(&mut r2, 64, 64, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_shape_rejected() {
        let mut s = square_clip();
        s.shapes[0].kind = ShapeKind::Rect { w: 40.0, h: 8.0 };
        assert!(matches!(generate(&s), Err(DyeError::Spec(_))));
    }
}
