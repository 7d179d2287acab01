use mixhar_core::augment::{rescale_with, time_warp_with, warp_positions, AugmentKind, AugmentSpec};
use mixhar_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn random_window(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
}

#[test]
fn rescale_preserves_within_channel_ratios() {
    let spec = AugmentSpec::rescale();
    for seed in 0..50 {
        let x: Vec<f64> = random_window(seed, 3 * 20).iter().map(|v| v + 3.0).collect();
        let y = spec.apply(&x, 3, 20, &mut seeded(seed + 100));
        for h in 0..3 {
            let (xc, yc) = (&x[h * 20..(h + 1) * 20], &y[h * 20..(h + 1) * 20]);
            let r0 = yc[0] / xc[0];
            for (a, b) in xc.iter().zip(yc) {
                assert!((b / a - r0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forced_unit_factors_are_identity() {
    let x = random_window(1, 40);
    assert_eq!(rescale_with(&x, 20, &[1.0, 1.0]), x);
}

#[test]
fn zero_windows_stay_zero() {
    let zero = vec![0.0; 60];
    for spec in [AugmentSpec::rescale(), AugmentSpec::time_warp(), AugmentSpec::scaling()] {
        assert_eq!(spec.apply(&zero, 3, 20, &mut seeded(4)), zero);
    }
}

#[test]
fn scaling_uses_one_global_factor() {
    let spec = AugmentSpec::scaling();
    for seed in 0..50 {
        let x: Vec<f64> = random_window(seed, 60).iter().map(|v| v + 3.0).collect();
        let y = spec.apply(&x, 3, 20, &mut seeded(seed));
        let k = y[0] / x[0];
        assert!((0.7..=1.3).contains(&k));
        for (a, b) in x.iter().zip(&y) {
            assert!((b / a - k).abs() < 1e-12);
        }
    }
}

#[test]
fn warping_a_ramp_reproduces_the_warp_map() {
    let len = 30;
    let ramp: Vec<f64> = (0..len).map(|i| i as f64).collect();
    let mut rng = seeded(9);
    for _ in 0..50 {
        let speeds: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
        let warped = time_warp_with(&ramp, len, &speeds);
        let pos = warp_positions(len, &speeds);
        for (a, b) in warped.iter().zip(&pos) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn warping_a_constant_is_identity() {
    let x = vec![2.5; 2 * 25];
    let y = AugmentSpec::time_warp().apply(&x, 2, 25, &mut seeded(3));
    for v in y {
        assert!((v - 2.5).abs() < 1e-12);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = AugmentSpec { sigma: -0.1, ..AugmentSpec::rescale() };
    assert!(bad.validate().is_err());
    let bad = AugmentSpec { clip: [1.2, 1.5], ..AugmentSpec::rescale() };
    assert!(bad.validate().is_err());
    let bad = AugmentSpec { knots: 0, ..AugmentSpec::time_warp() };
    assert!(bad.validate().is_err());
    assert!(AugmentSpec::time_warp().validate().is_ok());
}

proptest! {
    #[test]
    fn augmentations_preserve_shape_and_endpoints(seed in 0u64..10_000, h in 1usize..4, len in 8usize..60) {
        let x = random_window(seed, h * len);
        for kind in [AugmentKind::Rescale, AugmentKind::TimeWarp, AugmentKind::Scaling] {
            let spec = match kind {
                AugmentKind::Rescale => AugmentSpec::rescale(),
                AugmentKind::TimeWarp => AugmentSpec::time_warp(),
                AugmentKind::Scaling => AugmentSpec::scaling(),
            };
            let y = spec.apply(&x, h, len, &mut seeded(seed));
            prop_assert_eq!(y.len(), x.len());
            if kind == AugmentKind::TimeWarp {
                for c in 0..h {
                    prop_assert!((y[c * len] - x[c * len]).abs() < 1e-12);
                    prop_assert!((y[c * len + len - 1] - x[c * len + len - 1]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_positions_strictly_increase(seed in 0u64..10_000, len in 8usize..200) {
        let mut rng = seeded(seed);
        let speeds: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..=2.0)).collect();
        let pos = warp_positions(len, &speeds);
        prop_assert!(pos.windows(2).all(|w| w[1] > w[0]));
    }
}
