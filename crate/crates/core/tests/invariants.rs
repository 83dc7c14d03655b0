mod support;

use dyenet_core::flow::warp;
use dyenet_core::inference::{labels_to_tubes, tubes_to_labels};
use dyenet_core::linker::DEFAULT_THETA_AGREE;
use dyenet_core::model::{init_params, ModelDims};
use dyenet_core::ops::spatial_softmax;
use dyenet_core::remp::attention_gate;
use dyenet_core::sequence::LabelMap;
use dyenet_core::{BBox, FlowField, HiddenState, OimTable, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state(t: Tensor) -> HiddenState {
    HiddenState { tensor: t, identity: 1, frame: 2, bbox: BBox::new(0.0, 0.0, 16.0, 16.0) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(m in 1usize..10, scale in 0.1f32..60.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[1, m, m], |_| scale * rand::Rng::gen_range(&mut rng, -1.0..1.0f32));
        let a = spatial_softmax(&logits).unwrap();
        let sum: f64 = a.data().iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn attention_sums_to_one(hidden in 1usize..6, m in 2usize..9, seed in any::<u64>()) {
        let p = init_params(ModelDims { feat_width: 4, feat_depth: 1, embed_dim: 4, hidden_dim: hidden }, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = || Tensor::from_fn(&[hidden, m, m], |_| rand::Rng::gen_range(&mut rng, -3.0..3.0f32));
        let (a, gated) = attention_gate(&state(noise()), &state(noise()), &p).unwrap();
        let sum: f64 = a.data().iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(gated.tensor.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_flow_warp_is_identity(c in 1usize..4, h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::from_fn(&[c, h, w], |_| rand::Rng::gen_range(&mut rng, -1e3..1e3f32));
        prop_assert_eq!(warp(&map, &FlowField::zeros(h, w, 1, 2)).unwrap(), map);
    }

    #[test]
    fn oim_rows_stay_unit(rows in 1usize..6, dim in 1usize..8, mu in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0f64)).collect::<Vec<_>>();
        let mut lut = OimTable::new(rows, dim, draw(rows * dim)).unwrap();
        for step in 0..5 {
            let mut e = draw(dim);
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.iter_mut().for_each(|v| *v /= n);
            lut.update(step % rows, &e, mu).unwrap();
        }
        for r in 0..rows {
            let n = lut.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9 || n == 0.0);
        }
    }

    #[test]
    fn labels_round_trip_through_tubes(ids in proptest::collection::vec(0u8..4, 3 * 8 * 8)) {
        let labels: Vec<LabelMap> = ids.chunks(64).map(|c| LabelMap::new(8, 8, c.to_vec()).unwrap()).collect();
        let back = tubes_to_labels(&labels_to_tubes(&labels), 3, 8, 8);
        prop_assert_eq!(back, labels);
    }

    #[test]
    fn linker_output_is_consistent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = support::linker::random_instance(&mut rng, 5);
        let verdict = support::linker::check_instance(&inst, DEFAULT_THETA_AGREE);
        prop_assert!(verdict.is_ok(), "{:?}", verdict);
    }
}
