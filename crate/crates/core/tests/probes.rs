//! Probe fits on hidden states with known structure.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use oscilloprobe::probes::{fit_linear, fit_reverse, fit_taylor_cca, ProbeFlag, SplitPolicy};

const HOLDOUT: SplitPolicy = SplitPolicy::Holdout { seed: 11 };

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Hidden states `z·dirᵀ + noise` for a scalar code `z`.
fn planted(rng: &mut ChaCha8Rng, z: &[f64], hidden: usize, noise: f64) -> DMatrix<f64> {
    let dir = gaussian(rng, 1, hidden);
    let eps = gaussian(rng, z.len(), hidden);
    DMatrix::from_fn(z.len(), hidden, |i, j| z[i] * dir[(0, j)] + noise * eps[(i, j)])
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn planted_code_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = uniform(&mut rng, 1500);
    let hs = planted(&mut rng, &z, 16, 0.01);
    let fit = fit_linear(&hs, &z, HOLDOUT);
    assert!(fit.r2.unwrap() > 0.999, "{:?}", fit.r2);
    assert_eq!(fit.flag, None);
}

#[test]
fn independent_noise_scores_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = uniform(&mut rng, 2000);
    let hs = gaussian(&mut rng, 2000, 16);
    let r2 = fit_linear(&hs, &z, HOLDOUT).r2.unwrap();
    assert!(r2.abs() < 0.05, "{r2}");
    let rho2 = fit_taylor_cca(&hs, &z, 2, HOLDOUT).r2.unwrap();
    assert!(rho2 < 0.05, "{rho2}");
}

#[test]
fn linear_score_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = uniform(&mut rng, 800);
    let hs = planted(&mut rng, &z, 8, 0.5);
    let base = fit_linear(&hs, &z, HOLDOUT).r2.unwrap();

    let mix = gaussian(&mut rng, 8, 8) + DMatrix::identity(8, 8) * 3.0;
    let shift = gaussian(&mut rng, 1, 8);
    let moved = DMatrix::from_fn(800, 8, |i, j| (hs.row(i) * mix.column(j))[(0, 0)] + 5.0 * shift[(0, j)]);
    let target: Vec<f64> = z.iter().map(|v| -3.0 * v + 7.0).collect();
    let r2 = fit_linear(&moved, &target, HOLDOUT).r2.unwrap();
    assert!((r2 - base).abs() < 1e-4, "{base} vs {r2}");
}

#[test]
fn polynomial_score_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = uniform(&mut rng, 800);
    let sq: Vec<f64> = z.iter().map(|v| v * v).collect();
    let hs = planted(&mut rng, &sq, 8, 0.05);
    let base = fit_taylor_cca(&hs, &z, 2, HOLDOUT).r2.unwrap();
    assert!(base > 0.95, "{base}");
    let scaled_hs = hs.map(|v| 40.0 * v);
    let scaled_z: Vec<f64> = z.iter().map(|v| 0.25 * v).collect();
    let r2 = fit_taylor_cca(&scaled_hs, &scaled_z, 2, HOLDOUT).r2.unwrap();
    assert!((r2 - base).abs() < 1e-6, "{base} vs {r2}");
    assert!(fit_linear(&hs, &z, HOLDOUT).r2.unwrap() < 0.05);
}

#[test]
fn degree_one_correlation_equals_in_sample_r2() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = uniform(&mut rng, 600);
    let hs = planted(&mut rng, &z, 6, 1.0);
    let lin = fit_linear(&hs, &z, SplitPolicy::InSample).r2.unwrap();
    let cca = fit_taylor_cca(&hs, &z, 1, SplitPolicy::InSample).r2.unwrap();
    assert!((lin - cca).abs() < 1e-5, "{lin} vs {cca}");
}

#[test]
fn degenerate_inputs_are_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hs = gaussian(&mut rng, 200, 4);
    let constant = vec![0.3; 200];
    assert_eq!(fit_linear(&hs, &constant, HOLDOUT).flag, Some(ProbeFlag::DegenerateTarget));
    assert_eq!(fit_linear(&hs, &constant, HOLDOUT).r2, None);
    let z = uniform(&mut rng, 200);
    let flat = DMatrix::from_element(200, 4, 1.5);
    assert_eq!(fit_linear(&flat, &z, HOLDOUT).flag, Some(ProbeFlag::DegenerateHidden));
}

#[test]
fn reverse_variance_explained_grows_with_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feats = gaussian(&mut rng, 500, 4);
    let map = gaussian(&mut rng, 4, 12);
    let hs = &feats * &map + gaussian(&mut rng, 500, 12) * 0.5;
    let mut last = 0.0;
    for k in 1..=4 {
        let sub = feats.columns(0, k).into_owned();
        let ve = fit_reverse(&sub, &hs).variance_explained.unwrap();
        assert!(ve >= last - 1e-12, "{k} features: {ve} < {last}");
        last = ve;
    }
    let extra = gaussian(&mut rng, 500, 1);
    let mut more = DMatrix::zeros(500, 5);
    more.columns_mut(0, 4).copy_from(&feats);
    more.column_mut(4).copy_from(&extra.column(0));
    assert!(fit_reverse(&more, &hs).variance_explained.unwrap() >= last - 1e-12);
}

#[test]
fn reverse_reconstruction_is_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feats = gaussian(&mut rng, 300, 3);
    let map = gaussian(&mut rng, 3, 5);
    let hs = &feats * &map;
    let probe = fit_reverse(&feats, &hs);
    assert!((probe.variance_explained.unwrap() - 1.0).abs() < 1e-10);
    let row: Vec<f64> = feats.row(17).iter().copied().collect();
    let rec = probe.reconstruct(&row);
    for j in 0..5 {
        assert!((rec[j] - hs[(17, j)]).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn in_sample_scores_are_bounded(seed in 0u64..1000, hidden in 1usize..12, noise in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(&mut rng, 120);
        let hs = planted(&mut rng, &z, hidden, noise);
        let r2 = fit_linear(&hs, &z, SplitPolicy::InSample).r2.unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&r2));
        let rho2 = fit_taylor_cca(&hs, &z, 3, SplitPolicy::InSample).r2.unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&rho2));
        let ve = fit_reverse(&DMatrix::from_fn(120, 1, |i, _| z[i]), &hs).variance_explained.unwrap();
        prop_assert!((0.0..=1.0).contains(&ve));
    }

    #[test]
    fn holdout_is_seed_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(&mut rng, 100);
        let hs = planted(&mut rng, &z, 4, 0.7);
        let a = fit_linear(&hs, &z, SplitPolicy::Holdout { seed });
        let b = fit_linear(&hs, &z, SplitPolicy::Holdout { seed });
        prop_assert_eq!(a, b);
    }
}
