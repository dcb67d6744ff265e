//! Property tests over the library's core invariants.

use llm_mde_core::dataset::{patchify, unpatchify, DepthMap, RgbImage};
use llm_mde_core::metrics::compute_metrics_capped;
use llm_mde_core::tape::Tape;
use llm_mde_core::tensor::Tensor;
use llm_mde_core::training::ssi_loss;
use proptest::prelude::*;

fn depth_pair(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.05f64..9.5, len),
        prop::collection::vec(0.05f64..9.5, len),
    )
}

fn map(vals: Vec<f64>) -> DepthMap {
    let n = vals.len();
    DepthMap::dense(1, n, vals).unwrap()
}

proptest! {
    #[test]
    fn ssi_is_scale_invariant((pred, gt) in depth_pair(24), c in 0.1f64..10.0) {
        let base = ssi_loss(&map(pred.clone()), &map(gt.clone())).unwrap();
        let scaled: Vec<f64> = pred.iter().map(|v| v * c).collect();
        let shifted = ssi_loss(&map(scaled), &map(gt)).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn ssi_is_permutation_invariant((pred, gt) in depth_pair(16), seed in 0u64..1000) {
        let base = ssi_loss(&map(pred.clone()), &map(gt.clone())).unwrap();
        // deterministic pseudo-shuffle of the shared pixel order
        let mut order: Vec<usize> = (0..pred.len()).collect();
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let p2: Vec<f64> = order.iter().map(|&i| pred[i]).collect();
        let g2: Vec<f64> = order.iter().map(|&i| gt[i]).collect();
        let permuted = ssi_loss(&map(p2), &map(g2)).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn ssi_is_symmetric((pred, gt) in depth_pair(12)) {
        let ab = ssi_loss(&map(pred.clone()), &map(gt.clone())).unwrap();
        let ba = ssi_loss(&map(gt), &map(pred)).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn delta_thresholds_are_monotone((pred, gt) in depth_pair(40)) {
        let r = compute_metrics_capped(&map(pred), &map(gt), None).unwrap();
        prop_assert!(r.delta1 <= r.delta2 + 1e-15);
        prop_assert!(r.delta2 <= r.delta3 + 1e-15);
        prop_assert!(r.delta3 <= 1.0);
    }

    #[test]
    fn patchify_roundtrips_exactly(grid in 1usize..4, p_idx in 0usize..3, seed in 0u64..200) {
        let patch = [4usize, 8, 16][p_idx];
        let side = grid * patch;
        let mut state = seed.wrapping_add(1);
        let img = RgbImage::from_fn(side, side, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = (state >> 11) as f64 / (1u64 << 53) as f64;
            [v, (v * 0.5) % 1.0, (v * 0.25) % 1.0]
        });
        let patches = patchify(&img, patch).unwrap();
        prop_assert_eq!(patches.shape(), &[grid * grid, patch * patch * 3]);
        let back = unpatchify(&patches, side, side, patch).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::new([3, 4], vals.clone()));
        let s = tape.softmax_rows(x);
        for i in 0..3 {
            let row = tape.value(s).row(i).to_vec();
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let x2 = tape.leaf(Tensor::new([3, 4], shifted));
        let s2 = tape.softmax_rows(x2);
        let diff = tape.value(s).max_abs_diff(tape.value(s2));
        prop_assert!(diff < 1e-6);
    }
}
