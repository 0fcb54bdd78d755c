//! Oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use profit_core::plrt::WhitenedModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `max_λ [‖(I − P_X₁)W‖² − log|V_λ| − min_β (W − Xβ)ᵀV_λ⁻¹(W − Xβ)]`
/// with `V_λ = I + λZZᵀ`, evaluated with dense matrices.
pub fn dense_statistic(wm: &WhitenedModel, lambdas: &[f64]) -> f64 {
    let n = wm.w.len();
    let keep: Vec<usize> = (0..wm.x.ncols()).filter(|c| !wm.tested.contains(c)).collect();
    let x1 = wm.x.select_columns(&keep);
    let beta1 = (x1.transpose() * &x1).cholesky().unwrap().solve(&(x1.transpose() * &wm.w));
    let rss0 = (&wm.w - &x1 * beta1).norm_squared();
    let zzt = &wm.z * wm.z.transpose();
    lambdas
        .iter()
        .map(|&l| {
            let v = DMatrix::<f64>::identity(n, n) + &zzt * l;
            let chol = v.cholesky().unwrap();
            let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let vw = chol.solve(&wm.w);
            let vx = chol.solve(&wm.x);
            let xtvx = wm.x.transpose() * &vx;
            let beta = xtvx.cholesky().unwrap().solve(&(wm.x.transpose() * &vw));
            let r = &wm.w - &wm.x * &beta;
            let gls = r.dot(&chol.solve(&r));
            rss0 - logdet - gls
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn random_model(rng: &mut ChaCha8Rng) -> WhitenedModel {
    let n = rng.random_range(8..=40);
    let q = rng.random_range(1..=5);
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let knots: Vec<f64> = (0..q).map(|k| (k as f64 + 1.0) / (q as f64 + 1.0)).collect();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { t[i] });
    let z = DMatrix::from_fn(n, q, |i, k| (t[i] - knots[k]).max(0.0));
    let slope = rng.random_range(-2.0..2.0);
    let bump = rng.random_range(0.0..20.0);
    let w = DVector::from_fn(n, |i, _| {
        slope * t[i] + bump * (3.0 * t[i]).sin() + rng.random_range(-1.5..1.5)
    });
    WhitenedModel { w, x, z, tested: vec![1] }
}

pub fn ks_distance(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

