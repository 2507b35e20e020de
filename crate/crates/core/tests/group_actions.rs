//! Translation and rotation actions on images and feature maps.

use proptest::prelude::*;
use resonance::group::{feature_shift, inverse_shift_features, rotate_image, translate_image, Interpolation};
use resonance::model::ModelSpec;
use resonance::{Model, PadMode, Rounding, Shift, ShiftSet, Tensor};

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(vec![1, 2, h, w], 0.0, 1.0, &mut resonance::seed::rng(seed))
}

#[test]
fn shift_set_sizes() {
    assert_eq!(ShiftSet::square(0).shifts(), &[Shift::new(0, 0)]);
    assert_eq!(ShiftSet::square(0).weights(), &[1.0]);
    assert_eq!(ShiftSet::square(1).len(), 9);
    let s = ShiftSet::square(3);
    assert_eq!(s.len(), 49);
    assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(s.weights().iter().all(|&w| w == 1.0 / 49.0));
    let b = ShiftSet::build(2, 1);
    assert_eq!(b.len(), 15);
    assert!(b.shifts().contains(&Shift::new(0, 0)));
}

#[test]
fn zero_shift_is_identity() {
    let x = image(5, 6, 1);
    for pad in [PadMode::Zeros, PadMode::Circular] {
        assert_eq!(translate_image(&x, Shift::new(0, 0), pad).unwrap(), x);
    }
}

#[test]
fn stride_one_realignment_recovers_encoding() {
    // A stride-1 circular encoder commutes with circular shifts, so undoing
    // the shift on the features restores the clean encoding.
    let spec = ModelSpec::equivariant_probe([1, 7, 9], 3, 2);
    let m = Model::new(spec, 4).unwrap();
    let x = Tensor::rand_uniform(vec![1, 1, 7, 9], 0.0, 1.0, &mut resonance::seed::rng(2));
    let clean = m.forward_to_tap(&x, "features").unwrap();
    for (i, j) in [(1, 0), (-2, 3), (3, -4)] {
        let s = Shift::new(i, j);
        let shifted = m.forward_to_tap(&translate_image(&x, s, PadMode::Circular).unwrap(), "features").unwrap();
        let back = inverse_shift_features(&shifted, s, 1, Rounding::Nearest, PadMode::Circular).unwrap();
        assert!(back.linf_distance(&clean).unwrap() < 1e-12);
    }
}

#[test]
fn feature_shift_rounds_halves_away_from_zero() {
    assert_eq!(feature_shift(Shift::new(1, 0), 4, Rounding::Nearest).unwrap(), Shift::new(0, 0));
    assert_eq!(feature_shift(Shift::new(3, 0), 2, Rounding::Nearest).unwrap(), Shift::new(2, 0));
    assert_eq!(feature_shift(Shift::new(-3, 1), 2, Rounding::Nearest).unwrap(), Shift::new(-2, 1));
    assert_eq!(feature_shift(Shift::new(3, 0), 2, Rounding::Floor).unwrap(), Shift::new(1, 0));
}

#[test]
fn quarter_turn_nearest_is_invertible() {
    let x = image(6, 6, 3);
    let r = rotate_image(&x, 90.0, Interpolation::Nearest).unwrap();
    assert_ne!(r, x);
    let back = rotate_image(&r, -90.0, Interpolation::Nearest).unwrap();
    assert!(back.linf_distance(&x).unwrap() < 1e-12);
}

fn shift() -> impl Strategy<Value = Shift> {
    (-4isize..=4, -4isize..=4).prop_map(|(i, j)| Shift::new(i, j))
}

fn small_shift() -> impl Strategy<Value = Shift> {
    (-2isize..=2, -2isize..=2).prop_map(|(i, j)| Shift::new(i, j))
}

proptest! {
    #[test]
    fn circular_translations_compose(a in small_shift(), b in small_shift(), seed in 0u64..1000) {
        let x = image(5, 7, seed);
        let ab = translate_image(&translate_image(&x, a, PadMode::Circular).unwrap(), b, PadMode::Circular).unwrap();
        let sum = translate_image(&x, Shift::new(a.i + b.i, a.j + b.j), PadMode::Circular).unwrap();
        prop_assert_eq!(ab, sum);
        let back = translate_image(&translate_image(&x, a, PadMode::Circular).unwrap(), a.neg(), PadMode::Circular).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn translation_is_linear(s in shift(), c in -3.0f64..3.0, seed in 0u64..1000) {
        let (x, y) = (image(6, 6, seed), image(6, 6, seed + 1));
        let lhs = translate_image(&x.scale(c).add(&y).unwrap(), s, PadMode::Zeros).unwrap();
        let rhs = translate_image(&x, s, PadMode::Zeros).unwrap().scale(c)
            .add(&translate_image(&y, s, PadMode::Zeros).unwrap()).unwrap();
        prop_assert!(lhs.linf_distance(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn zero_padded_shift_preserves_or_drops_mass(s in shift(), seed in 0u64..1000) {
        let x = image(6, 6, seed);
        let t = translate_image(&x, s, PadMode::Zeros).unwrap();
        prop_assert!(t.sum() <= x.sum() + 1e-12);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
