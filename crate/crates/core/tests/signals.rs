mod common;

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use sparse_lpv::signals::{
    dft, dft_matrix, idft_real, spectral_derivative, Multisine, MultisineSpec, TimeGrid,
};

use common::rng;

#[test]
fn dft_matrix_is_unitary() {
    for n in [7, 16, 33, 64] {
        let grid = TimeGrid::new(n, 0.1, 0.0).unwrap();
        let f = dft_matrix(&grid);
        let err = (f.adjoint() * &f - DMatrix::<Complex64>::identity(n, n)).camax();
        assert!(err < 1e-12, "n {n}: {err:e}");
    }
}

#[test]
fn dft_agrees_with_explicit_matrix() {
    let mut r = rng(3);
    let grid = TimeGrid::new(31, 0.2, 5.0).unwrap();
    let x: Vec<f64> = (0..31).map(|_| r.random_range(-1.0..1.0)).collect();
    let fx = dft_matrix(&grid) * nalgebra::DVector::from_iterator(31, x.iter().map(|&v| Complex64::new(v, 0.0)));
    let s = dft(&x, &grid).unwrap();
    let err = s.bins.iter().zip(fx.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(err < 1e-12);
}

#[test]
fn spectral_derivative_matches_analytic_on_band_limited_signal() {
    let grid = TimeGrid::new(400, 0.05, 0.0).unwrap();
    let spec = MultisineSpec::consecutive(1.0 / grid.duration(), 12, 0.5, 9);
    let ms = Multisine::calibrated(&spec, &grid).unwrap();
    let x = ms.sample(&grid, 0);
    for order in 1..=3 {
        let analytic = ms.sample(&grid, order);
        let spectral = spectral_derivative(&x, &grid, order).unwrap();
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = spectral.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8 * scale.max(1.0), "order {order}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval_and_roundtrip(seed in 0u64..100_000, n in 2usize..200) {
        let mut r = rng(seed);
        let grid = TimeGrid::new(n, 0.1, 0.0).unwrap();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let s = dft(&x, &grid).unwrap();
        let et: f64 = x.iter().map(|v| v * v).sum();
        let ef: f64 = s.bins.iter().map(|b| b.norm_sqr()).sum();
        prop_assert!((et - ef).abs() <= 1e-12 * et.max(1.0));
        prop_assert!(s.conjugate_asymmetry() < 1e-12 * et.sqrt().max(1.0));
        let back = idft_real(&s).unwrap();
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12 * 3.0 * (n as f64).sqrt());
    }
}
