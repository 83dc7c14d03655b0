//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! returns the gradient of every node. Coordinates fed to sampling ops and
//! targets fed to losses are constants: they are never differentiated.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{DyeError, Result};
use crate::kernels::{self, ConvDims, ConvGeom, Real};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Borrowed view of a parameter as stored by some [`ParamSource`].
pub enum ParamRef<'a> {
    F32(&'a [usize], &'a [f32]),
    F64(&'a [usize], &'a [f64]),
}

/// Anything a tape can read named parameters from.
pub trait ParamSource {
    fn fetch(&self, key: &str) -> Result<ParamRef<'_>>;
}

impl ParamSource for ParamStore {
    fn fetch(&self, key: &str) -> Result<ParamRef<'_>> {
        let t = self.get(key)?;
        Ok(ParamRef::F32(t.shape(), t.data()))
    }
}

/// Parameters held in double precision, used for gradient checking.
#[derive(Debug, Clone, Default)]
pub struct F64Params {
    pub values: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl F64Params {
    pub fn from_store(store: &ParamStore) -> Self {
        let values = store
            .iter()
            .map(|(k, t)| {
                (k.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()))
            })
            .collect();
        F64Params { values }
    }
}

impl ParamSource for F64Params {
    fn fetch(&self, key: &str) -> Result<ParamRef<'_>> {
        let (s, v) = self
            .values
            .get(key)
            .ok_or_else(|| DyeError::contract(format!("unknown parameter `{key}`")))?;
        Ok(ParamRef::F64(s, v))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Sample { x: Var, points: Arc<Vec<(f64, f64)>> },
    Softmax(Var),
    Gate { h: Var, a: Var },
    Concat(Vec<Var>),
    MulConst { x: Var, k: Arc<Vec<f64>> },
    Scale(Var, f64),
    Add(Var, Var),
    Gap(Var),
    Linear { x: Var, w: Var, b: Var },
    L2Norm(Var),
    BceLogits { x: Var, target: Arc<Vec<f64>> },
    Oim { e: Var, lut: Arc<Vec<f64>>, label: usize, tau: f64 },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(DyeError::contract(format!("leaf shape {shape:?} mismatches data")));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf))
    }

    pub fn leaf_f32(&mut self, shape: &[usize], value: &[f32]) -> Result<Var> {
        self.leaf(shape, value.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf_f32(t.shape(), t.data()).expect("tensor shape is consistent")
    }

    /// Loads a named parameter once per tape; later calls return the same node.
    pub fn param(&mut self, src: &(impl ParamSource + ?Sized), key: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(key) {
            return Ok(v);
        }
        let (shape, value) = match src.fetch(key)? {
            ParamRef::F32(s, d) => (s.to_vec(), d.iter().map(|&v| T::of(v as f64)).collect()),
            ParamRef::F64(s, d) => (s.to_vec(), d.iter().map(|&v| T::of(v)).collect()),
        };
        let v = self.push(shape, value, Op::Param(key.to_string()));
        self.params.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].as_f64()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.iter().map(|x| x.as_f64() as f32).collect())
            .expect("node shape is consistent")
    }

    fn chw(&self, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v)[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(DyeError::contract(format!("expected CxHxW, got {s:?}"))),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (c, h, wd) = self.chw(x)?;
        let (o, wc, k, k2) = match self.shape(w)[..] {
            [o, wc, k, k2] => (o, wc, k, k2),
            ref s => return Err(DyeError::contract(format!("conv weight must be OxCxKxK, got {s:?}"))),
        };
        if wc != c {
            return Err(DyeError::contract(format!("conv input has {c} channels, weight expects {wc}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(DyeError::contract(format!("conv kernel must be square and odd, got {k}x{k2}")));
        }
        if self.shape(b) != [o] {
            return Err(DyeError::contract("conv bias length differs from output channels"));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(DyeError::contract("stride and dilation must be positive"));
        }
        let (oh, ow) = match (geom.out_len(h, k), geom.out_len(wd, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(DyeError::contract("convolution output would be empty")),
        };
        let dims = ConvDims { c, h, w: wd, o, k, oh, ow };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), dims, geom);
        Ok(self.push(vec![o, oh, ow], out, Op::Conv { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| T::of(kernels::sigmoid(v.as_f64()))).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x))
    }

    /// Bilinear samples of a CxHxW map, reshaped to `C x out_h x out_w`.
    pub fn sample(&mut self, x: Var, points: Arc<Vec<(f64, f64)>>, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        if points.len() != out_h * out_w {
            return Err(DyeError::contract("sample grid size mismatches point count"));
        }
        let out = kernels::sample_forward(self.value(x), c, h, w, &points);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Sample { x, points }))
    }

    /// Softmax over every element of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax_forward(self.value(x));
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    /// `h[c] * a` for every channel `c`, with `a` of shape 1xHxW.
    pub fn gate(&mut self, h: Var, a: Var) -> Result<Var> {
        let (c, hh, ww) = self.chw(h)?;
        if self.shape(a) != [1, hh, ww] {
            return Err(DyeError::contract("attention map must be 1xHxW matching the hidden state"));
        }
        let plane = hh * ww;
        let av = self.value(a);
        let out = self
            .value(h)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * av[i % plane])
            .collect();
        Ok(self.push(vec![c, hh, ww], out, Op::Gate { h, a }))
    }

    /// Concatenates rank-3 maps along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.chw(parts[0])?;
        let mut c_total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.chw(p)?;
            if (ph, pw) != (h, w) {
                return Err(DyeError::contract("concat inputs differ in spatial size"));
            }
            c_total += c;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![c_total, h, w], out, Op::Concat(parts.to_vec())))
    }

    /// Elementwise product with a constant; a constant of one plane's length
    /// broadcasts over channels.
    pub fn mul_const(&mut self, x: Var, k: Arc<Vec<f64>>) -> Result<Var> {
        let n = self.value(x).len();
        if k.is_empty() || !n.is_multiple_of(k.len()) {
            return Err(DyeError::contract("constant factor does not broadcast"));
        }
        let m = k.len();
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v * T::of(k[i % m])).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, k }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v * T::of(s)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(DyeError::contract("add operands differ in shape"));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// Mean of several same-shape nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Global average pooling: CxHxW to a length-C vector.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x)?;
        let plane = h * w;
        let xv = self.value(x);
        let out = (0..c)
            .map(|ch| {
                let s: f64 = xv[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum();
                T::of(s / plane as f64)
            })
            .collect();
        Ok(self.push(vec![c], out, Op::Gap(x)))
    }

    /// Fully connected layer `w x + b` with `w` of shape OxC.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let c = self.value(x).len();
        let (o, wc) = match self.shape(w)[..] {
            [o, wc] => (o, wc),
            ref s => return Err(DyeError::contract(format!("linear weight must be OxC, got {s:?}"))),
        };
        if wc != c || self.shape(b) != [o] {
            return Err(DyeError::contract("linear layer shape mismatch"));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let out = (0..o)
            .map(|r| {
                let s: f64 = wv[r * c..(r + 1) * c]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum();
                T::of(s + bv[r].as_f64())
            })
            .collect();
        Ok(self.push(vec![o], out, Op::Linear { x, w, b }))
    }

    /// L2 normalization of a vector. Returns the pre-normalization norm too;
    /// callers decide whether it is degenerate.
    pub fn l2_normalize(&mut self, x: Var) -> (Var, f64) {
        let norm = self.value(x).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        let out = self.value(x).iter().map(|v| T::of(v.as_f64() * inv)).collect();
        (self.push(self.shape(x).to_vec(), out, Op::L2Norm(x)), norm)
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: Arc<Vec<f64>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(DyeError::contract("BCE target size mismatch"));
        }
        let n = xv.len() as f64;
        let total: f64 = xv
            .iter()
            .zip(target.iter())
            .map(|(l, &t)| {
                let l = l.as_f64();
                kernels::softplus(l) - t * l
            })
            .sum();
        Ok(self.push(vec![1], vec![T::of(total / n)], Op::BceLogits { x, target }))
    }

    /// OIM classification loss of one embedding against a lookup table of
    /// `rows = lut.len() / d` unit vectors: `-log softmax(lut · e / tau)[label]`.
    pub fn oim(&mut self, e: Var, lut: Arc<Vec<f64>>, label: usize, tau: f64) -> Result<Var> {
        let d = self.value(e).len();
        if d == 0 || !lut.len().is_multiple_of(d) || label >= lut.len() / d {
            return Err(DyeError::contract("OIM label outside lookup table"));
        }
        let logits = oim_logits(self.value(e), &lut, tau);
        let lse = log_sum_exp(&logits);
        let loss = lse - logits[label];
        Ok(self.push(vec![1], vec![T::of(loss)], Op::Oim { e, lut, label, tau }))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut slots: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![T::one(); self.nodes[loss.0].value.len()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Grads { slots }
    }

    fn backprop_node(&self, i: usize, g: &[T], slots: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let acc = |slots: &mut [Option<Vec<T>>], v: Var, d: Vec<T>| match &mut slots[v.0] {
            Some(s) => s.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let [c, h, wd] = self.nodes[x.0].shape[..] else { unreachable!() };
                let [o, _, k, _] = self.nodes[w.0].shape[..] else { unreachable!() };
                let dims = ConvDims { c, h, w: wd, o, k, oh: node.shape[1], ow: node.shape[2] };
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, dims, *geom);
                acc(slots, *x, dx);
                acc(slots, *w, dw);
                acc(slots, *b, db);
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(slots, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                acc(slots, *x, d);
            }
            Op::Sample { x, points } => {
                let [c, h, w] = self.nodes[x.0].shape[..] else { unreachable!() };
                acc(slots, *x, kernels::sample_backward(g, c, h, w, points));
            }
            Op::Softmax(x) => acc(slots, *x, kernels::softmax_backward(&node.value, g)),
            Op::Gate { h, a } => {
                let plane = node.shape[1] * node.shape[2];
                let av = self.value(*a);
                let hv = self.value(*h);
                let dh = g.iter().enumerate().map(|(j, &gv)| gv * av[j % plane]).collect();
                let mut da = vec![0f64; plane];
                for (j, (&gv, &hvj)) in g.iter().zip(hv).enumerate() {
                    da[j % plane] += gv.as_f64() * hvj.as_f64();
                }
                acc(slots, *h, dh);
                acc(slots, *a, da.into_iter().map(T::of).collect());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(slots, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::MulConst { x, k } => {
                let m = k.len();
                let d = g.iter().enumerate().map(|(j, &gv)| gv * T::of(k[j % m])).collect();
                acc(slots, *x, d);
            }
            Op::Scale(x, s) => acc(slots, *x, g.iter().map(|&gv| gv * T::of(*s)).collect()),
            Op::Add(a, b) => {
                acc(slots, *a, g.to_vec());
                acc(slots, *b, g.to_vec());
            }
            Op::Gap(x) => {
                let [c, h, w] = self.nodes[x.0].shape[..] else { unreachable!() };
                let plane = h * w;
                let inv = T::of(1.0 / plane as f64);
                let d = (0..c * plane).map(|j| g[j / plane] * inv).collect();
                acc(slots, *x, d);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let c = xv.len();
                let o = g.len();
                let mut dx = vec![0f64; c];
                let mut dw = vec![T::zero(); o * c];
                for r in 0..o {
                    let gr = g[r].as_f64();
                    for j in 0..c {
                        dx[j] += gr * wv[r * c + j].as_f64();
                        dw[r * c + j] = T::of(gr * xv[j].as_f64());
                    }
                }
                acc(slots, *x, dx.into_iter().map(T::of).collect());
                acc(slots, *w, dw);
                acc(slots, *b, g.to_vec());
            }
            Op::L2Norm(x) => {
                let xv = self.value(*x);
                let norm = xv.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    // d(x/|x|) = (g - y (y.g)) / |x|
                    let y = &node.value;
                    let yg: f64 = y.iter().zip(g).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let d = y
                        .iter()
                        .zip(g)
                        .map(|(yv, gv)| T::of((gv.as_f64() - yv.as_f64() * yg) / norm))
                        .collect();
                    acc(slots, *x, d);
                }
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                let g0 = g[0].as_f64();
                let d = xv
                    .iter()
                    .zip(target.iter())
                    .map(|(l, &t)| T::of(g0 * (kernels::sigmoid(l.as_f64()) - t) / n))
                    .collect();
                acc(slots, *x, d);
            }
            Op::Oim { e, lut, label, tau } => {
                let ev = self.value(*e);
                let d = ev.len();
                let logits = oim_logits(ev, lut, *tau);
                let probs = kernels::softmax_forward(&logits);
                let g0 = g[0].as_f64();
                let mut de = vec![0f64; d];
                for (r, p) in probs.iter().enumerate() {
                    let coeff = (p - if r == *label { 1.0 } else { 0.0 }) / tau;
                    for j in 0..d {
                        de[j] += g0 * coeff * lut[r * d + j];
                    }
                }
                acc(slots, *e, de.into_iter().map(T::of).collect());
            }
        }
    }

    /// Parameter gradients of a backward pass, keyed by parameter name.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads<T>) -> impl Iterator<Item = (&'a str, &'a [T])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match &n.op {
            Op::Param(k) => grads.slots[i].as_deref().map(|g| (k.as_str(), g)),
            _ => None,
        })
    }

    /// Adds this tape's parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, grads: &Grads<T>, store: &mut ParamStore) -> Result<()> {
        for (key, g) in self.param_grads(grads) {
            let gf: Vec<f32> = g.iter().map(|v| v.as_f64() as f32).collect();
            store.accumulate_grad(key, &gf)?;
        }
        Ok(())
    }
}

fn oim_logits<T: Real>(e: &[T], lut: &[f64], tau: f64) -> Vec<f64> {
    let d = e.len();
    lut.chunks(d)
        .map(|row| row.iter().zip(e).map(|(r, v)| r * v.as_f64()).sum::<f64>() / tau)
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_loaded_once() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::filled(&[2], 1.0));
        let mut tape = Tape::<f32>::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "a").unwrap();
        assert_eq!(a, b);
        assert!(tape.param(&store, "missing").is_err());
    }

    #[test]
    fn grads_accumulate_over_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.scale(y, 0.5);
        let target = Arc::new(vec![0.0; 3]);
        let l = tape.bce_with_logits(s, target).unwrap();
        let g = tape.backward(l);
        let gx = g.get(x).unwrap();
        for (i, &v) in [1.0f64, -2.0, 3.0].iter().enumerate() {
            let expect = kernels::sigmoid(v) / 3.0;
            assert!((gx[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let w = tape.leaf(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        let b = tape.leaf(&[1], vec![0.0]).unwrap();
        assert!(matches!(
            tape.conv2d(x, w, b, ConvGeom::same(3)),
            Err(DyeError::Contract(_))
        ));
    }
}
