//! Frame-level feature extraction at 1/8 resolution, with a shared cache.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{DyeError, Result};
use crate::kernels::{ConvGeom, Real};
use crate::tape::{ParamSource, Tape, Var};
use crate::tensor::Tensor;

/// Total downsampling factor of the feature network.
pub const FEATURE_STRIDE: usize = 8;

/// One video frame: 3xHxW pixels in `[0, 1]`, 1-based index.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub pixels: Tensor,
}

impl Frame {
    pub fn new(index: usize, pixels: Tensor) -> Result<Self> {
        let (c, h, w) = pixels.chw()?;
        if c != 3 {
            return Err(DyeError::contract(format!("frames need 3 channels, got {c}")));
        }
        if h < 16 || w < 16 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(DyeError::contract(format!(
                "frame {h}x{w} must be at least 16x16 with sides divisible by 8 (pad first)"
            )));
        }
        Ok(Frame { index, pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Output of the feature network for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub frame_index: usize,
}

const DOWN: ConvGeom = ConvGeom { stride: 2, dilation: 1, padding: 1 };
const DILATED: ConvGeom = ConvGeom { stride: 1, dilation: 2, padding: 2 };

fn conv_relu<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &(impl ParamSource + ?Sized),
    name: &str,
    geom: ConvGeom,
) -> Result<Var> {
    let w = tape.param(p, &format!("{name}.w"))?;
    let b = tape.param(p, &format!("{name}.b"))?;
    let y = tape.conv2d(x, w, b, geom)?;
    Ok(tape.relu(y))
}

/// Three stride-2 3x3 blocks followed by `feat.depth` dilated blocks
/// (dilation 2, stride 1), ReLU after each.
pub fn feature_forward<T: Real>(tape: &mut Tape<T>, pixels: Var, p: &(impl ParamSource + ?Sized)) -> Result<Var> {
    let mut x = conv_relu(tape, pixels, p, "feat.conv1", DOWN)?;
    x = conv_relu(tape, x, p, "feat.conv2", DOWN)?;
    x = conv_relu(tape, x, p, "feat.conv3", DOWN)?;
    let mut i = 0;
    while p.fetch(&format!("feat.dil{i}.w")).is_ok() {
        x = conv_relu(tape, x, p, &format!("feat.dil{i}"), DILATED)?;
        i += 1;
    }
    Ok(x)
}

pub fn extract_features(frame: &Frame, params: &(impl ParamSource + ?Sized)) -> Result<FeatureMap> {
    let (_, h, w) = frame.pixels.chw()?;
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(DyeError::contract("frame dimensions must be divisible by 8"));
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf_tensor(&frame.pixels);
    let f = feature_forward(&mut tape, x, params)?;
    Ok(FeatureMap { tensor: tape.tensor(f), frame_index: frame.index })
}

/// Per-frame feature cache shared by re-identification and propagation.
#[derive(Debug, Default)]
pub struct FeatureCache {
    maps: Mutex<HashMap<usize, Arc<FeatureMap>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &self,
        frame: &Frame,
        params: &(impl ParamSource + ?Sized),
    ) -> Result<Arc<FeatureMap>> {
        if let Some(f) = self.maps.lock().expect("cache lock").get(&frame.index) {
            return Ok(Arc::clone(f));
        }
        let computed = Arc::new(extract_features(frame, params)?);
        let mut maps = self.maps.lock().expect("cache lock");
        Ok(Arc::clone(maps.entry(frame.index).or_insert(computed)))
    }

    pub fn len(&self) -> usize {
        self.maps.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelDims};
    use proptest::prelude::*;

    fn dims() -> ModelDims {
        ModelDims { feat_width: 8, feat_depth: 1, embed_dim: 16, hidden_dim: 8 }
    }

    fn frame(h: usize, w: usize, seed: f32) -> Frame {
        Frame::new(1, Tensor::from_fn(&[3, h, w], |i| ((i as f32 * 0.013 + seed).sin() + 1.0) / 2.0)).unwrap()
    }

    #[test]
    fn eighth_resolution() {
        let p = init_params(dims(), 1);
        let f = extract_features(&frame(64, 64, 0.0), &p).unwrap();
        assert_eq!(f.tensor.shape(), &[8, 8, 8]);
    }

    #[test]
    fn deterministic_and_zero_preserving() {
        let p = init_params(dims(), 1);
        let a = extract_features(&frame(32, 48, 0.3), &p).unwrap();
        let b = extract_features(&frame(32, 48, 0.3), &p).unwrap();
        assert_eq!(a, b);
        let zero = Frame::new(2, Tensor::zeros(&[3, 32, 32])).unwrap();
        let z = extract_features(&zero, &p).unwrap();
        assert!(z.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_unpadded_frames() {
        assert!(Frame::new(1, Tensor::zeros(&[3, 60, 64])).is_err());
        assert!(Frame::new(1, Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn cache_shares_one_object() {
        let p = init_params(dims(), 1);
        let cache = FeatureCache::new();
        let f = frame(32, 32, 0.1);
        let a = cache.get_or_compute(&f, &p).unwrap();
        let b = cache.get_or_compute(&f, &p).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn shape_law(hb in 2usize..7, wb in 2usize..7) {
            let p = init_params(dims(), 2);
            let f = extract_features(&frame(hb * 8, wb * 8, 0.7), &p).unwrap();
            prop_assert_eq!(f.tensor.shape(), &[8, hb, wb]);
        }
    }
}
