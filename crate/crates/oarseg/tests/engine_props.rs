//! Property tests over the tensor engine and metric primitives.

use proptest::prelude::*;

use oarseg::eval::{dice, hd95};
use oarseg::infer::window_layout;
use oarseg::tensor::graph::Graph;
use oarseg::tensor::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e3f64..1e3, 2..24)) {
        let n = vals.len();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[n], vals).unwrap(), false).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let sum: f64 = g.value(y).values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        // strictly positive up to exp underflow at extreme gaps
        prop_assert!(g.value(y).values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_conv_is_identity(vals in prop::collection::vec(-10.0f64..10.0, 16)) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 4, 4], vals.clone()).unwrap(), false).unwrap();
        let k = g.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 1, true).unwrap();
        prop_assert_eq!(g.value(y).values(), vals.as_slice());
    }

    #[test]
    fn upsample_preserves_constant_mean(c in -100.0f64..100.0, factor in 2usize..4) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], c), false).unwrap();
        let y = g.upsample(x, factor).unwrap();
        for v in g.value(y).values() {
            prop_assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_symmetry(a in prop::collection::vec(0u8..3, 27), b in prop::collection::vec(0u8..3, 27)) {
        for class in 1..3u8 {
            let ab = dice(&a, &b, class).unwrap();
            let ba = dice(&b, &a, class).unwrap();
            match (ab, ba) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                // the absent-side conventions are asymmetric by design
                _ => {}
            }
        }
    }

    #[test]
    fn hd95_spacing_doubling(a in prop::collection::vec(0u8..2, 27), b in prop::collection::vec(0u8..2, 27)) {
        let one = hd95(&a, &b, 1, [1.0, 1.0, 1.0], [3, 3, 3]).unwrap();
        let two = hd95(&a, &b, 1, [2.0, 2.0, 2.0], [3, 3, 3]).unwrap();
        match (one, two) {
            (Some(x), Some(y)) => prop_assert!((y - 2.0 * x).abs() < 1e-9),
            (None, None) => {}
            _ => prop_assert!(false, "presence must agree"),
        }
    }

    #[test]
    fn window_layout_always_covers(extent in 1usize..600, patch in prop::sample::select(vec![128usize, 320]), overlap in 0.0f64..0.9) {
        let origins = window_layout(extent, patch, overlap);
        let mut covered = vec![false; extent];
        for &o in &origins {
            for x in o..(o + patch).min(extent) {
                covered[x] = true;
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn backward_fanout_matches_sum_of_paths(vals in prop::collection::vec(-2.0f64..2.0, 4)) {
        // y = sum(x*x) + 3*sum(x): dy/dx = 2x + 3
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[4], vals.clone()).unwrap(), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum_all(sq).unwrap();
        let s2 = g.sum_all(x).unwrap();
        let s2 = g.mul_scalar(s2, 3.0).unwrap();
        let y = g.add(s1, s2).unwrap();
        let grads = g.backward(y).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.iter().zip(&vals) {
            prop_assert!((g - (2.0 * v + 3.0)).abs() < 1e-12);
        }
    }
}
