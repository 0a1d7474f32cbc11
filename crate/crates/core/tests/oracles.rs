//! Independent re-derivations of quantities the library computes.

mod common;

use common::{gaussian_table, gradient_deviation, ridge_deviation, table};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabprobe::metrics;
use tabprobe::probekit::{fit_probe, linear_encoding_oracle, ProbeSpec};

#[test]
fn ridge_matches_normal_equations() {
    for &(m, p, lambda) in &[(500, 50, 1e-3), (120, 7, 0.5), (60, 50, 2.0)] {
        let dev = ridge_deviation(m, p, lambda);
        assert!(dev <= 1e-8, "m={m} p={p}: {dev}");
    }
}

#[test]
fn r2_is_affine_invariant() {
    let (x, y) = gaussian_table(200, 10, 9);
    let base = fit_probe(&table(x.clone(), y.clone()), &ProbeSpec::linear(), 1).unwrap();
    let y2: Vec<f64> = y.iter().map(|v| -3.5 * v + 12.0).collect();
    let x2 = DMatrix::from_fn(200, 10, |i, j| x[(i, j)] * (0.01 + j as f64) - 4.0 * j as f64);
    let moved = fit_probe(&table(x2, y2), &ProbeSpec::linear(), 1).unwrap();
    assert!((base.r2_test - moved.r2_test).abs() < 1e-10);
    assert!((base.r2_train - moved.r2_train).abs() < 1e-10);

    let truth = [1.0, 2.0, 4.0, 3.0];
    let pred = [1.1, 1.9, 3.7, 3.2];
    let t2: Vec<f64> = truth.iter().map(|v| 2.0 * v - 1.0).collect();
    let p2: Vec<f64> = pred.iter().map(|v| 2.0 * v - 1.0).collect();
    assert!((metrics::r2(&truth, &pred) - metrics::r2(&t2, &p2)).abs() < 1e-12);
}

#[test]
fn permuted_targets_are_not_decodable() {
    let (x, mut y) = gaussian_table(200, 50, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in (1..y.len()).rev() {
        y.swap(i, rng.random_range(0..=i));
    }
    for seed in 0..3 {
        let r = fit_probe(&table(x.clone(), y.clone()), &ProbeSpec::linear(), seed).unwrap();
        assert!(r.r2_test <= 0.05, "seed {seed}: {}", r.r2_test);
    }
}

#[test]
fn linear_oracle_favours_linear_probes() {
    let data = linear_encoding_oracle(400, 32, 0.1, 3).unwrap();
    let results: Vec<(usize, f64)> = (0..3)
        .flat_map(|seed| {
            let data = &data;
            [0usize, 3].into_iter().map(move |depth| {
                let spec = ProbeSpec { depth, width: 64, max_epochs: 150, ..ProbeSpec::default() };
                (depth, fit_probe(data, &spec, seed).unwrap().r2_test)
            })
        })
        .collect();
    let mean = |d: usize| results.iter().filter(|r| r.0 == d).map(|r| r.1).sum::<f64>() / 3.0;
    assert!(mean(0) > 0.95);
    assert!(mean(0) >= mean(3) - 0.02, "depth0 {} depth3 {}", mean(0), mean(3));
}

#[test]
fn gradients_match_finite_differences() {
    let dev = gradient_deviation(6);
    assert!(dev < 1e-3, "{dev}");
}
