//! Randomized invariants of the normalization policies and moment estimators.

use fusion_core::adapt::{accumulate_target_stats, bn_forward_fused, bn_forward_source, bn_forward_target};
use fusion_core::nn::{BatchNormParts, BatchNormState};
use fusion_core::tensor::{channel_moments_f64, Tensor};
use proptest::prelude::*;

const C: usize = 3;

fn state_strategy() -> impl Strategy<Value = BatchNormState> {
    let v = |lo: f32, hi: f32| prop::collection::vec(lo..hi, C);
    (v(0.5, 1.5), v(-0.5, 0.5), v(-0.5, 0.5), v(0.5, 2.0), v(-0.5, 0.5), v(0.5, 2.0)).prop_map(
        |(gamma, alpha, source_mean, source_var, target_mean, target_var)| {
            BatchNormState::from_parts(BatchNormParts {
                gamma,
                alpha,
                source_mean,
                source_var,
                target_mean,
                target_var,
                epsilon: 1e-5,
                momentum: 0.1,
                target_steps: 1,
            })
            .unwrap()
        },
    )
}

fn input_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f32..1.0, 2 * C * 4).prop_map(|v| Tensor::new(vec![2, C, 2, 2], v).unwrap())
}

proptest! {
    #[test]
    fn fused_reduces_to_source_and_target(s in state_strategy(), x in input_strategy()) {
        prop_assert_eq!(bn_forward_fused(&x, &s, 0.0).unwrap(), bn_forward_source(&x, &s).unwrap());
        prop_assert_eq!(bn_forward_fused(&x, &s, 1.0).unwrap(), bn_forward_target(&x, &s).unwrap());
    }

    #[test]
    fn fused_is_affine_in_beta(s in state_strategy(), x in input_strategy(), beta in 0.0f64..1.0) {
        let o0 = bn_forward_fused(&x, &s, 0.0).unwrap();
        let o1 = bn_forward_fused(&x, &s, 1.0).unwrap();
        let ob = bn_forward_fused(&x, &s, beta).unwrap();
        for ((&b, &a1), &a0) in ob.data().iter().zip(o1.data()).zip(o0.data()) {
            let expected = beta * a1 as f64 + (1.0 - beta) * a0 as f64;
            prop_assert!((b as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_contracts_geometrically(
        s in state_strategy(),
        x in input_strategy(),
        k in 1usize..30,
    ) {
        let mut s = s;
        let target = channel_moments_f64(&x).unwrap();
        let start: Vec<f64> = s.target_mean().data().iter().map(|&v| v as f64).collect();
        accumulate_target_stats(std::iter::repeat(x.clone()), &mut s, k, false).unwrap();
        let dist = |m: &[f64]| m.iter().zip(&target.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let now: Vec<f64> = s.target_mean().data().iter().map(|&v| v as f64).collect();
        prop_assert!(dist(&now) <= 0.9f64.powi(k as i32) * dist(&start) + 1e-6);
    }

    #[test]
    fn moments_ignore_sample_order(x in input_strategy()) {
        let swapped = x.select(&[1, 0]).unwrap();
        let (a, b) = (channel_moments_f64(&x).unwrap(), channel_moments_f64(&swapped).unwrap());
        for c in 0..C {
            prop_assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            prop_assert!((a.var[c] - b.var[c]).abs() < 1e-12);
            prop_assert!(a.var[c] >= 0.0);
        }
    }

    #[test]
    fn source_forward_never_mutates(s in state_strategy(), x in input_strategy()) {
        let before = s.clone();
        let _ = bn_forward_source(&x, &s).unwrap();
        let _ = bn_forward_fused(&x, &s, 0.5).unwrap();
        prop_assert_eq!(before, s);
    }
}
