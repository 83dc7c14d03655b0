//! Dense tensors and the named parameter store.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{DyeError, Result};

/// Dense row-major `f32` array of rank at most 4 with an optional gradient.
///
/// Maps use channel, height, width order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(DyeError::contract(format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DyeError::contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f32>> {
        self.grad.as_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(DyeError::contract("gradient length differs from tensor length"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Channel, height, width of a rank-3 map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(DyeError::contract(format!("expected a CxHxW map, got {:?}", self.shape))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > 4 {
            return Err(DyeError::contract(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Named model parameters with per-key momentum buffers and a frozen set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        let key = key.into();
        self.momentum.remove(&key);
        self.params.insert(key, value);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.params
            .get(key)
            .ok_or_else(|| DyeError::contract(format!("unknown parameter `{key}`")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(key)
            .ok_or_else(|| DyeError::contract(format!("unknown parameter `{key}`")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self, key: &str) {
        self.frozen.insert(key.to_string());
    }

    pub fn unfreeze(&mut self, key: &str) {
        self.frozen.remove(key);
    }

    pub fn is_frozen(&self, key: &str) -> bool {
        self.frozen.contains(key)
    }

    pub fn momentum(&self, key: &str) -> Option<&Tensor> {
        self.momentum.get(key)
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Adds `grad` into the gradient slot of `key`, allocating it if needed.
    pub fn accumulate_grad(&mut self, key: &str, grad: &[f32]) -> Result<()> {
        let t = self.get_mut(key)?;
        if grad.len() != t.len() {
            return Err(DyeError::contract(format!("gradient for `{key}` has wrong length")));
        }
        if t.grad.is_none() {
            t.zero_grad();
        }
        for (g, d) in t.grad.as_mut().unwrap().iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }
}

/// Default momentum.
pub const SGD_MOMENTUM: f32 = 0.9;
/// Default weight decay.
pub const SGD_WEIGHT_DECAY: f32 = 5e-4;

/// One SGD step with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * w`, `w <- w - lr * v`.
///
/// Frozen keys are skipped entirely. Gradients are cleared afterwards.
pub fn sgd_momentum_step(
    store: &mut ParamStore,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    for (key, param) in &store.params {
        if !store.frozen.contains(key) && param.grad.is_none() {
            return Err(DyeError::contract(format!("parameter `{key}` has no gradient")));
        }
    }
    let ParamStore { params, momentum: buffers, frozen } = store;
    for (key, param) in params.iter_mut() {
        if frozen.contains(key) {
            param.grad = None;
            continue;
        }
        let buf = buffers
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(&param.shape));
        let grad = param.grad.take().expect("checked above");
        for ((w, v), g) in param.data.iter_mut().zip(buf.data.iter_mut()).zip(grad) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}
