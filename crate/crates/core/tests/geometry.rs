mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::geometry::{generated_flow_is_exact, roi_align_linear, warp_linear, zero_flow_identity};

#[test]
fn zero_flow_warp_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        zero_flow_identity(&mut rng).unwrap();
    }
}

#[test]
fn roi_align_reproduces_linear_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let worst = (0..200).map(|_| roi_align_linear(&mut rng).unwrap()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn warp_reproduces_linear_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst = (0..200).map(|_| warp_linear(&mut rng).unwrap()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn generated_flow_warps_frames_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..40 {
        generated_flow_is_exact(&mut rng).unwrap();
    }
}
