//! Exactness checks for warping and RoIAlign against analytic fields.

use dyenet_core::flow::warp;
use dyenet_core::features::FEATURE_STRIDE;
use dyenet_core::reid::roi_align;
use dyenet_core::synth::{generate, ShapeSpec, SynthSpec};
use dyenet_core::{BBox, FeatureMap, FlowField, Tensor};
use rand::Rng;

/// Zero flow reproduces a random map bit for bit.
pub fn zero_flow_identity(rng: &mut impl Rng) -> Result<(), String> {
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..12), rng.gen_range(1..12));
    let map = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-10.0..10.0));
    let out = warp(&map, &FlowField::zeros(h, w, 2, 1)).map_err(|e| e.to_string())?;
    if out != map {
        return Err(format!("zero-flow warp changed a {c}x{h}x{w} map"));
    }
    Ok(())
}

struct Linear {
    a: Vec<f64>,
    bx: Vec<f64>,
    by: Vec<f64>,
}

impl Linear {
    fn random(rng: &mut impl Rng, c: usize, scale: f64) -> Self {
        let mut v = || (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
        let a = v();
        let bx = v().into_iter().map(|x| x * scale).collect();
        let by = v().into_iter().map(|x| x * scale).collect();
        Linear { a, bx, by }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        self.a[c] + self.bx[c] * x + self.by[c] * y
    }

    fn tensor(&self, h: usize, w: usize) -> Tensor {
        let c = self.a.len();
        Tensor::from_fn(&[c, h, w], |i| {
            let (k, r) = (i / (h * w), i % (h * w));
            self.at(k, (r % w) as f64, (r / w) as f64) as f32
        })
    }
}

/// Largest deviation of RoIAlign from the analytic linear field over a
/// random box whose cell centres stay inside the sampled feature grid.
pub fn roi_align_linear(rng: &mut impl Rng) -> Result<f64, String> {
    let (c, fh, fw) = (rng.gen_range(1..4), rng.gen_range(2..8), rng.gen_range(2..8));
    let field = Linear::random(rng, c, 0.1);
    let fm = FeatureMap { tensor: field.tensor(fh, fw), frame_index: 1 };
    let s = FEATURE_STRIDE as f64;
    // feature cell k is centred at frame coordinate (k + 0.5) * stride
    let (lo_x, hi_x) = (0.5 * s, (fw as f64 - 0.5) * s);
    let (lo_y, hi_y) = (0.5 * s, (fh as f64 - 0.5) * s);
    let x0 = rng.gen_range(lo_x..hi_x - 0.5);
    let x1 = rng.gen_range(x0 + 0.25..hi_x);
    let y0 = rng.gen_range(lo_y..hi_y - 0.5);
    let y1 = rng.gen_range(y0 + 0.25..hi_y);
    let m = rng.gen_range(2..8);
    let b = BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32);
    let out = roi_align(&fm, &b, m).map_err(|e| e.to_string())?;
    // recompute the box from its f32 corners
    let (x0, y0, x1, y1) = (b.x0 as f64, b.y0 as f64, b.x1 as f64, b.y1 as f64);
    let mut worst = 0f64;
    for k in 0..c {
        for v in 0..m {
            for u in 0..m {
                let fx = x0 + (u as f64 + 0.5) * (x1 - x0) / m as f64;
                let fy = y0 + (v as f64 + 0.5) * (y1 - y0) / m as f64;
                let expect = field.at(k, fx / s - 0.5, fy / s - 0.5);
                let got = out.tensor.data()[(k * m + v) * m + u] as f64;
                worst = worst.max((got - expect).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest deviation of a warp under a constant sub-pixel flow from the
/// analytic linear field, over output pixels whose source stays inside.
pub fn warp_linear(rng: &mut impl Rng) -> Result<f64, String> {
    let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(4..12), rng.gen_range(4..12));
    let field = Linear::random(rng, c, 0.05);
    let (dx, dy) = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
    let out = warp(&field.tensor(h, w), &FlowField::constant(h, w, dx, dy, 2, 1)).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x as f64 + dx as f64, y as f64 + dy as f64);
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                    continue;
                }
                let got = out.data()[(k * h + y) * w + x] as f64;
                worst = worst.max((got - field.at(k, sx, sy)).abs());
            }
        }
    }
    Ok(worst)
}

/// One shape moving by a random integer step per frame; the generator's
/// reverse flow must carry each frame onto the next exactly, except where
/// the shape uncovers background.
pub fn generated_flow_is_exact(rng: &mut impl Rng) -> Result<(), String> {
    let (w, h) = (rng.gen_range(24..48), rng.gen_range(24..48));
    let v = (rng.gen_range(-3..=3) as f32, rng.gen_range(-3..=3) as f32);
    let center = (w as f32 / 2.0, h as f32 / 2.0);
    let shape = if rng.gen_bool(0.5) {
        ShapeSpec::rect(rng.gen_range(4..10) as f32, rng.gen_range(4..10) as f32, center, v, rng.gen_range(0..4))
    } else {
        ShapeSpec::disc(rng.gen_range(3..6) as f32, center, v, rng.gen_range(0..4))
    };
    let spec = SynthSpec {
        name: "translate".into(),
        width: w,
        height: h,
        frames: 4,
        shapes: vec![shape],
        occlusions: vec![],
        seed: rng.gen(),
    };
    let seq = generate(&spec).map_err(|e| e.to_string())?;
    for j in 2..=seq.len() {
        let bw = seq.flow_bw.as_ref().unwrap()[j - 1].as_ref().unwrap();
        let prev = &seq.frame(j - 1).unwrap().pixels;
        let target = &seq.frame(j).unwrap().pixels;
        let warped = warp(prev, bw).map_err(|e| e.to_string())?;
        let (pm, cm) = (seq.gt_mask(j - 1, 1).unwrap(), seq.gt_mask(j, 1).unwrap());
        for y in 0..h {
            for x in 0..w {
                if pm.get(x, y) && !cm.get(x, y) {
                    continue;
                }
                for k in 0..3 {
                    if warped.at3(k, y, x) != target.at3(k, y, x) {
                        return Err(format!("{w}x{h} velocity {v:?}: frame {j} pixel ({x},{y}) differs"));
                    }
                }
            }
        }
    }
    Ok(())
}
