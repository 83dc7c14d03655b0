//! Shared fixtures for the criterion benches.

use dyenet_core::model::{init_params, ModelDims};
use dyenet_core::synth::{generate, occlusion_clip};
use dyenet_core::{ParamStore, Sequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bench_dims() -> ModelDims {
    ModelDims { feat_width: 32, feat_depth: 1, embed_dim: 32, hidden_dim: 32 }
}

/// Randomly initialized weights; timing does not depend on training.
pub fn bench_params() -> ParamStore {
    init_params(bench_dims(), 0)
}

/// The 64x64, 16-frame, two-object occlusion clip.
pub fn bench_clip() -> Sequence {
    generate(&occlusion_clip(0)).expect("preset is valid")
}

/// Seeded uniform values in `[-1, 1)`.
pub fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
