//! Moments of the synthetic generator against analytic values.

use std::f64::consts::PI;

use profit_core::data::unit_grid;
use profit_core::marginal::{eigen_basis, MarginalCovariance};
use profit_core::simstudy::{generate, phi1, true_basis, true_marginal_cov, SimConfig};

#[test]
fn mean_at_left_edge_is_one() {
    let ds = generate(&SimConfig { n: 2000, seed: 1, ..Default::default() }).unwrap();
    let means: Vec<f64> = ds
        .subjects
        .iter()
        .map(|s| s.curves.iter().map(|c| c[0]).sum::<f64>() / s.curves.len() as f64)
        .collect();
    let n = means.len() as f64;
    let m = means.iter().sum::<f64>() / n;
    let sd = (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((m - 1.0).abs() < 3.0 * sd / n.sqrt(), "mean {m}, se {}", sd / n.sqrt());
}

#[test]
fn first_component_variance() {
    let cfg = SimConfig {
        n: 1000,
        score_var: [4.0, 2.0, 0.0, 0.0],
        visit_var: [0.0, 0.0],
        noise_var: 0.0,
        seed: 2,
        ..Default::default()
    };
    let ds = generate(&cfg).unwrap();
    let p: Vec<f64> = ds.grid_s.iter().map(|&s| phi1(s)).collect();
    let norm: f64 = p.iter().map(|v| v * v).sum();
    let (mut obs, mut expected) = (0.0, 0.0);
    for (_, t, y) in ds.curves() {
        let e1 = y
            .iter()
            .zip(&ds.grid_s)
            .zip(&p)
            .map(|((v, s), f)| (v - (PI * s / 2.0).cos()) * f)
            .sum::<f64>()
            / norm;
        obs += e1 * e1;
        expected += 8.0 * (2.0 * PI * t).sin().powi(2) + 4.0 * (2.0 * PI * t).cos().powi(2);
    }
    let ratio = obs / expected;
    assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn projected_null_mean_is_constant() {
    let grid = unit_grid(101);
    let basis = true_basis(&grid, &SimConfig::default()).unwrap();
    let phi = basis.function(0);
    let eta: f64 = grid.iter().zip(&phi).map(|(s, f)| (PI * s / 2.0).cos() * f).sum::<f64>() / 101.0;
    assert!((eta - 8.0 * 2f64.sqrt() / (15.0 * PI)).abs() < 5e-3, "eta {eta}");
}

#[test]
fn analytic_covariance_eigenvalues() {
    let grid = unit_grid(101);
    let xi = true_marginal_cov(&grid, &SimConfig::default());
    let mc = MarginalCovariance {
        grid_s: grid,
        raw: xi.clone(),
        smoothed: Some(xi),
        weights_used: vec![],
        bandwidth: None,
    };
    let b = eigen_basis(&mc, 0.999).unwrap();
    assert_eq!(b.k(), 2);
    assert!((b.eigenvalues[0] - 8.0).abs() / 8.0 < 0.02, "{:?}", b.eigenvalues);
    assert!((b.eigenvalues[1] - 16.0 / 3.0).abs() / (16.0 / 3.0) < 0.02);
}

#[test]
fn generator_is_seeded() {
    let cfg = SimConfig { n: 30, delta: 1.0, seed: 4, ..Default::default() };
    assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    assert_eq!(pool.install(|| generate(&cfg).unwrap()), generate(&cfg).unwrap());
}
