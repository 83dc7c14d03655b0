//! Parameter layout and initialization for the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DyeError, Result};
use crate::tensor::{ParamStore, Tensor};

/// Layer widths of a model. Everything except `roi_m` can be recovered from
/// a parameter store, so checkpoints need no side-car config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_width: usize,
    pub feat_depth: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { feat_width: 32, feat_depth: 1, embed_dim: 256, hidden_dim: 32 }
    }
}

impl ModelDims {
    pub fn stem_width(&self) -> usize {
        (self.feat_width / 2).max(4)
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let dim0 = |k: &str| store.get(k).map(|t| t.shape()[0]);
        let mut depth = 0;
        while store.contains(&format!("feat.dil{depth}.w")) {
            depth += 1;
        }
        let dims = ModelDims {
            feat_width: dim0("feat.conv3.w")?,
            feat_depth: depth,
            embed_dim: dim0("embed.fc.w")?,
            hidden_dim: dim0("remp.nr2.w")?,
        };
        let expected = init_params(dims, 0);
        for (k, t) in expected.iter() {
            let got = store.get(k)?;
            if got.shape() != t.shape() {
                return Err(DyeError::contract(format!(
                    "parameter `{k}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(dims)
    }
}

/// `(key, shape, relu_follows)` for every learnable tensor.
pub fn param_layout(d: ModelDims) -> Vec<(String, Vec<usize>, bool)> {
    let (w, s, h, e) = (d.feat_width, d.stem_width(), d.hidden_dim, d.embed_dim);
    let mut out = Vec::new();
    let mut conv = |name: &str, o: usize, c: usize, k: usize, relu: bool| {
        out.push((format!("{name}.w"), vec![o, c, k, k], relu));
        out.push((format!("{name}.b"), vec![o], relu));
    };
    conv("feat.conv1", s, 3, 3, true);
    conv("feat.conv2", w, s, 3, true);
    conv("feat.conv3", w, w, 3, true);
    for i in 0..d.feat_depth {
        conv(&format!("feat.dil{i}"), w, w, 3, true);
    }
    conv("mask.conv1", w, w, 3, true);
    conv("mask.conv2", w, w, 3, true);
    conv("mask.out", 1, w, 1, false);
    conv("embed.conv1", w, w, 3, true);
    conv("embed.conv2", w, w, 3, true);
    conv("remp.nr1", h, h + w, 3, true);
    conv("remp.nr2", h, h, 3, true);
    conv("remp.att", 1, h, 3, false);
    conv("remp.no1", h, h, 3, true);
    conv("remp.no2", h, h, 3, true);
    conv("remp.no3", 1, h, 3, false);
    out.push(("embed.fc.w".into(), vec![e, w], false));
    out.push(("embed.fc.b".into(), vec![e], false));
    out
}

/// Fan-in scaled uniform initialization (Kaiming-style), zero biases,
/// deterministic in `seed`.
pub fn init_params(d: ModelDims, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (key, shape, relu) in param_layout(d) {
        let t = if key.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let gain = if relu { 6.0 } else { 3.0 };
            let bound = (gain / fan_in as f32).sqrt();
            Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
        };
        store.insert(key, t);
    }
    store
}

/// Parameter keys of the feature network.
pub fn feature_keys(store: &ParamStore) -> Vec<String> {
    store.keys().filter(|k| k.starts_with("feat.")).map(str::to_string).collect()
}
