mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use eventclip::encoders::FeatureMatrix;
use eventclip::objectives::{
    attraction_loss, consistency_loss, repulsion_loss, total_loss, LossWeights,
};
use eventclip::reconstruction::IntensityImage;
use eventclip::representation::{crop, CropRect};

fn setup(seed: u64, b: usize, d: usize, c: usize) -> (Vec<Vec<f64>>, FeatureMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..b).map(|_| unit(&mut rng, d)).collect();
    let text = FeatureMatrix::from_rows((0..c).map(|_| unit(&mut rng, d)).collect()).unwrap();
    let pseudo = (0..b).map(|_| rng.gen_range(0..c)).collect();
    (v, text, pseudo)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attraction_matches_oracle_and_is_non_negative(seed in any::<u64>(), b in 1usize..9, d in 2usize..17, c in 1usize..6, tau in 0.2f64..3.0) {
        let (v, text, pseudo) = setup(seed, b, d, c);
        let s: Vec<usize> = (0..b).filter(|i| (seed >> (i % 60)) & 1 == 1).collect();
        let out = attraction_loss(&v, &text, &pseudo, &s, tau).unwrap();
        prop_assert_eq!(out.skipped, s.is_empty());
        prop_assert!(out.value >= 0.0);
        let anchors: Vec<Vec<f64>> = pseudo.iter().map(|&k| text.row(k).to_vec()).collect();
        prop_assert!((out.value - info_nce_oracle(&v, &anchors, &s, tau)).abs() < 1e-9);
        // unselected samples get no gradient
        for i in (0..b).filter(|i| !s.contains(i)) {
            prop_assert!(out.grad[i].iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn repulsion_matches_oracle_and_ignores_order(seed in any::<u64>(), b in 1usize..9, d in 2usize..17, tau in 0.2f64..3.0) {
        let (mut v, _, _) = setup(seed, b, d, 1);
        let out = repulsion_loss(&v, tau).unwrap();
        prop_assert!((out.value - repulsion_oracle(&v, tau)).abs() < 1e-9);
        v.reverse();
        prop_assert!((repulsion_loss(&v, tau).unwrap().value - out.value).abs() < 1e-9);
    }

    #[test]
    fn consistency_is_zero_for_matching_crops(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
        let global = IntensityImage::new(n, n, data).unwrap();
        let size = rng.gen_range(1..=n);
        let rect = CropRect { top: rng.gen_range(0..=n - size), left: rng.gen_range(0..=n - size), size };
        let local = crop(&global, &rect).unwrap();
        let out = consistency_loss(&local, &global, &rect).unwrap();
        prop_assert_eq!(out.value, 0.0);
        let shifted = IntensityImage::new(size, size, local.data().iter().map(|v| (v + 0.25).min(1.0)).collect()).unwrap();
        let out = consistency_loss(&shifted, &global, &rect).unwrap();
        prop_assert!(out.value <= 0.25 + 1e-12);
        prop_assert!(out.value >= 0.0);
    }
}

#[test]
fn degenerate_sets() {
    let (v, text, pseudo) = setup(1, 4, 8, 3);
    let one = attraction_loss(&v, &text, &pseudo, &[2], 1.0).unwrap();
    assert_eq!((one.value, one.skipped), (0.0, false));
    assert!(one.grad.iter().flatten().all(|g| *g == 0.0));
    let none = attraction_loss(&v, &text, &pseudo, &[], 1.0).unwrap();
    assert!(none.skipped);
    assert_eq!(repulsion_loss(&v[..1], 1.0).unwrap().value, 0.0);
    assert!(attraction_loss(&v, &text, &pseudo, &[9], 1.0).is_err());
    assert!(attraction_loss(&v, &text, &pseudo, &[0, 1], 0.0).is_err());
    assert!(attraction_loss(&v, &text, &[0, 1, 2, 7], &[2, 3], 1.0).is_err());
}

#[test]
fn repeated_categories_stay_in_the_denominator() {
    let e = |i: usize| {
        let mut v = vec![0.0; 3];
        v[i] = 1.0;
        v
    };
    let text = FeatureMatrix::from_rows(vec![e(0), e(1)]).unwrap();
    let v = vec![e(0), e(0), e(1)];
    let got = attraction_loss(&v, &text, &[0, 0, 1], &[0, 1, 2], 1.0)
        .unwrap()
        .value;
    let ee = std::f64::consts::E;
    // two samples see {e, e, 1}, the third sees {1, 1, e}
    let want = 2.0 * ((2.0 * ee + 1.0) / ee).ln() + ((2.0 + ee) / ee).ln();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn weighted_total() {
    let w = LossWeights::default();
    assert!((total_loss(2.0, 3.0, 0.5, &w).unwrap() - (2.0 + 0.03 + 0.5)).abs() < 1e-12);
    assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    let no_rep = LossWeights {
        lambda_rep: 0.0,
        ..w
    };
    assert_eq!(total_loss(1.0, 100.0, 0.0, &no_rep).unwrap(), 1.0);
}
