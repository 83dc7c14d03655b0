//! Forward and backward kernels shared by the tape and the plain tensor ops.
//!
//! Kernels are generic over the element type so the same code runs in `f32`
//! for the pipeline and in `f64` for gradient checking. Reductions always
//! accumulate in `f64`.

use std::fmt::Debug;

use num_traits::Float;

/// Element type of tape values.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Stride, dilation and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn same(k: usize) -> Self {
        ConvGeom { stride: 1, dilation: 1, padding: k / 2 }
    }

    /// Output extent along one axis, or `None` when it would be empty.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Dimensions of a convolution problem.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Valid output range `[lo, hi)` for a kernel tap at offset `off` along an
/// axis: those outputs whose input coordinate `out*stride + off - pad` lies
/// inside `[0, len)`.
fn tap_range(off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // in = out*stride + off - pad  in [0, len)
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let hi_in = len + pad; // out*stride + off < len + pad
    let hi = if hi_in > off { (hi_in - off).div_ceil(stride) } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

/// Unrolls input patches into a `(c*k*k) x (oh*ow)` matrix; taps that fall
/// in the zero padding stay zero.
fn im2col<T: Real>(x: &[T], d: ConvDims, g: ConvGeom) -> Vec<T> {
    let plane = d.oh * d.ow;
    let mut col = vec![T::zero(); d.c * d.k * d.k * plane];
    for c in 0..d.c {
        let xin = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            let (ylo, yhi) = tap_range(ky * g.dilation, g.padding, g.stride, d.h, d.oh);
            for kx in 0..d.k {
                let (xlo, xhi) = tap_range(kx * g.dilation, g.padding, g.stride, d.w, d.ow);
                let row = ((c * d.k + ky) * d.k + kx) * plane;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let src = &xin[iy * d.w..(iy + 1) * d.w];
                    let dst = &mut col[row + oy * d.ow..row + (oy + 1) * d.ow];
                    for ox in xlo..xhi {
                        dst[ox] = src[ox * g.stride + kx * g.dilation - g.padding];
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], d: ConvDims, g: ConvGeom) -> Vec<T> {
    let plane = d.oh * d.ow;
    let mut dx = vec![T::zero(); d.c * d.h * d.w];
    for c in 0..d.c {
        let dxin = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            let (ylo, yhi) = tap_range(ky * g.dilation, g.padding, g.stride, d.h, d.oh);
            for kx in 0..d.k {
                let (xlo, xhi) = tap_range(kx * g.dilation, g.padding, g.stride, d.w, d.ow);
                let row = ((c * d.k + ky) * d.k + kx) * plane;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let src = &col[row + oy * d.ow..row + (oy + 1) * d.ow];
                    for (ox, &v) in src.iter().enumerate().take(xhi).skip(xlo) {
                        let ix = ox * g.stride + kx * g.dilation - g.padding;
                        dxin[iy * d.w + ix] = dxin[iy * d.w + ix] + v;
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let n = a.len() / 8 * 8;
    for (ca, cb) in a[..n].chunks_exact(8).zip(b[..n].chunks_exact(8)) {
        for i in 0..8 {
            acc[i] = acc[i] + ca[i] * cb[i];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for i in n..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Cross-correlation with zero padding; accumulates in the element type.
pub fn conv2d_forward<T: Real>(x: &[T], wt: &[T], b: &[T], d: ConvDims, g: ConvGeom) -> Vec<T> {
    let plane = d.oh * d.ow;
    let kk = d.c * d.k * d.k;
    let col = im2col(x, d, g);
    let mut out = vec![T::zero(); d.o * plane];
    for o in 0..d.o {
        let orow = &mut out[o * plane..(o + 1) * plane];
        orow.iter_mut().for_each(|v| *v = b[o]);
        for (i, &wv) in wt[o * kk..(o + 1) * kk].iter().enumerate() {
            if wv != T::zero() {
                axpy(wv, &col[i * plane..(i + 1) * plane], orow);
            }
        }
    }
    out
}

/// Returns gradients with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dout: &[T],
    d: ConvDims,
    g: ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = d.oh * d.ow;
    let kk = d.c * d.k * d.k;
    let col = im2col(x, d, g);
    let mut dw = vec![T::zero(); wt.len()];
    let mut dcol = vec![T::zero(); kk * plane];
    let mut db = vec![T::zero(); d.o];
    for o in 0..d.o {
        let go = &dout[o * plane..(o + 1) * plane];
        db[o] = T::of(go.iter().map(|v| v.as_f64()).sum());
        for i in 0..kk {
            dw[o * kk + i] = dot(go, &col[i * plane..(i + 1) * plane]);
            let wv = wt[o * kk + i];
            if wv != T::zero() {
                axpy(wv, go, &mut dcol[i * plane..(i + 1) * plane]);
            }
        }
    }
    (col2im(&dcol, d, g), dw, db)
}

/// Corner indices and weights for one bilinear sample; `None` marks a corner
/// outside the map (zero padding).
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub idx: [Option<usize>; 4],
    pub wgt: [f64; 4],
}

pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> Taps {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [(x0, y0), (x0 + 1.0, y0), (x0, y0 + 1.0), (x0 + 1.0, y0 + 1.0)];
    let wgt = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let mut idx = [None; 4];
    for (slot, &(cx, cy)) in idx.iter_mut().zip(&corners) {
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            *slot = Some(cy as usize * w + cx as usize);
        }
    }
    Taps { idx, wgt }
}

/// Samples a CxHxW map at `points` (x, y in index coordinates), producing a
/// channel-major `C x P` buffer.
pub fn sample_forward<T: Real>(map: &[T], c: usize, h: usize, w: usize, points: &[(f64, f64)]) -> Vec<T> {
    let taps: Vec<Taps> = points.iter().map(|&(x, y)| bilinear_taps(h, w, x, y)).collect();
    let plane = h * w;
    let mut out = Vec::with_capacity(c * points.len());
    for ch in 0..c {
        let m = &map[ch * plane..(ch + 1) * plane];
        for t in &taps {
            let mut acc = 0f64;
            for k in 0..4 {
                if let Some(i) = t.idx[k] {
                    acc += t.wgt[k] * m[i].as_f64();
                }
            }
            out.push(T::of(acc));
        }
    }
    out
}

pub fn sample_backward<T: Real>(
    dout: &[T],
    c: usize,
    h: usize,
    w: usize,
    points: &[(f64, f64)],
) -> Vec<T> {
    let taps: Vec<Taps> = points.iter().map(|&(x, y)| bilinear_taps(h, w, x, y)).collect();
    let plane = h * w;
    let mut dmap = vec![0f64; c * plane];
    for ch in 0..c {
        let dm = &mut dmap[ch * plane..(ch + 1) * plane];
        for (p, t) in taps.iter().enumerate() {
            let g = dout[ch * points.len() + p].as_f64();
            for k in 0..4 {
                if let Some(i) = t.idx[k] {
                    dm[i] += t.wgt[k] * g;
                }
            }
        }
    }
    dmap.into_iter().map(T::of).collect()
}

pub fn softmax_forward<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::of(e / total)).collect()
}

/// Gradient of softmax given its output `p` and upstream `dout`.
pub fn softmax_backward<T: Real>(p: &[T], dout: &[T]) -> Vec<T> {
    let dot: f64 = p.iter().zip(dout).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    p.iter()
        .zip(dout)
        .map(|(a, g)| T::of(a.as_f64() * (g.as_f64() - dot)))
        .collect()
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(v))`.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
