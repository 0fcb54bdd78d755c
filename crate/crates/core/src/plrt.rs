//! Pseudo likelihood ratio test for a polynomial-plus-truncated-power
//! mixed model on a pre-whitened projected series.
//!
//! With unit error variance and `λ = σ²_b`, the profiled log likelihood
//! ratio against `λ = 0` is diagonal in the eigenbasis of `Ẑᵀ(I − P_X̂)Ẑ`:
//!
//! ```text
//! 2logL(λ) − 2logL(0) = Σ_q λζ_q w_q² / (1 + λζ_q) − Σ_q log(1 + λξ_q)
//! ```
//!
//! Under the null `w_q² ~ χ²₁`, which is what [`simulate_null`] draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ProfitError, Result};
use crate::linalg::{logspace, orthonormal_columns, sym_eigen_desc};
use crate::marginal::ProjectedSeries;
use crate::prewhiten::BlockCovariance;
use crate::rng::{substream, tag};

/// Draws per independently seeded block of the null simulation.
const SIM_BLOCK: usize = 1000;

/// Relative size below which a `ζ` direction is dropped.
const ZETA_DROP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotRule {
    /// Count from the formula before de-duplication.
    pub requested: usize,
    pub knots: Vec<f64>,
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(x: &[f64], level: f64) -> f64 {
    let h = (x.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

/// Knot count `max(20, min(U/4, 40))` for `U` distinct times, clamped to
/// `[1, U − p − 1]`, with knots at the equally spaced quantile levels
/// `q / (Q + 1)` of the distinct times.
pub fn knot_rule(times: &[f64], p: usize) -> Result<KnotRule> {
    let mut u = times.to_vec();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(ProfitError::Validation("non-finite visit time".into()));
    }
    u.sort_by(f64::total_cmp);
    u.dedup();
    if u.len() < 2 {
        return Err(ProfitError::Degenerate(
            "knot placement needs at least 2 distinct times".into(),
        ));
    }
    let nu = u.len() as f64;
    let formula = (0.25 * nu).clamp(20.0, 40.0).floor() as usize;
    let cap = u.len().saturating_sub(p + 1).max(1);
    let q = formula.min(cap).max(1);
    let mut knots: Vec<f64> = (1..=q)
        .map(|i| quantile_sorted(&u, i as f64 / (q + 1) as f64))
        .collect();
    knots.dedup();
    if knots.len() < q {
        log::warn!("knot collisions reduced Q from {q} to {}", knots.len());
    }
    Ok(KnotRule {
        requested: q,
        knots,
    })
}

/// Fixed and random-effect designs, stacked subject-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedModelDesign {
    pub p: usize,
    pub knots: Vec<f64>,
    /// `N × (p + 1 + covariates)`: `1, t, …, t^p`, then covariates.
    pub x: DMatrix<f64>,
    /// `N × Q` truncated power columns `(t − κ_q)₊^p`.
    pub z: DMatrix<f64>,
    /// Columns of `x` under test (the polynomial slopes).
    pub tested: Vec<usize>,
}

fn truncated_power(t: f64, knot: f64, p: usize) -> f64 {
    let d = t - knot;
    if d > 0.0 {
        d.powi(p as i32)
    } else {
        0.0
    }
}

pub fn build_design(ps: &ProjectedSeries, p: usize, knots: &[f64]) -> Result<MixedModelDesign> {
    if p == 0 {
        return Err(ProfitError::Config("polynomial order must be at least 1".into()));
    }
    let n = ps.n_total();
    let qc = ps.covariate_names.len();
    let mut x = DMatrix::zeros(n, p + 1 + qc);
    let mut z = DMatrix::zeros(n, knots.len());
    let mut row = 0;
    for s in &ps.subjects {
        if s.covariates.len() != qc {
            return Err(ProfitError::Dimension(format!(
                "subject {} carries {} covariates, expected {qc}",
                s.id,
                s.covariates.len()
            )));
        }
        for &t in &s.times {
            for d in 0..=p {
                x[(row, d)] = t.powi(d as i32);
            }
            for c in 0..qc {
                x[(row, p + 1 + c)] = s.covariates[c];
            }
            for (q, &k) in knots.iter().enumerate() {
                z[(row, q)] = truncated_power(t, k, p);
            }
            row += 1;
        }
    }
    orthonormal_columns(&x).map_err(|e| {
        ProfitError::Rank(format!("fixed-effect design is rank deficient: {e}"))
    })?;
    Ok(MixedModelDesign {
        p,
        knots: knots.to_vec(),
        x,
        z,
        tested: (1..=p).collect(),
    })
}

/// Pre-whitened response and designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenedModel {
    pub w: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub tested: Vec<usize>,
}

/// Multiply each subject's rows by its inverse-square-root block.
pub fn whiten(
    design: &MixedModelDesign,
    ps: &ProjectedSeries,
    blocks: &BlockCovariance,
) -> Result<WhitenedModel> {
    if blocks.inv_sqrt.len() != ps.subjects.len() || design.x.nrows() != ps.n_total() {
        return Err(ProfitError::Dimension(
            "blocks, design and series disagree on the subject layout".into(),
        ));
    }
    let n = ps.n_total();
    let mut w = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, design.x.ncols());
    let mut z = DMatrix::zeros(n, design.z.ncols());
    let mut start = 0;
    for (s, si) in ps.subjects.iter().zip(&blocks.inv_sqrt) {
        let m = s.times.len();
        if si.nrows() != m || si.ncols() != m {
            return Err(ProfitError::Dimension(format!(
                "block for subject {} is {}x{}, expected {m}x{m}",
                s.id,
                si.nrows(),
                si.ncols()
            )));
        }
        let wi = si * DVector::from_column_slice(&s.values);
        w.rows_mut(start, m).copy_from(&wi);
        x.rows_mut(start, m).copy_from(&(si * design.x.rows(start, m)));
        z.rows_mut(start, m).copy_from(&(si * design.z.rows(start, m)));
        start += m;
    }
    Ok(WhitenedModel {
        w,
        x,
        z,
        tested: design.tested.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpectrum {
    /// Eigenvalues of `ẐᵀẐ`, descending.
    pub xi: Vec<f64>,
    /// Eigenvalues of `Ẑᵀ(I − P_X̂)Ẑ`, descending.
    pub zeta: Vec<f64>,
    pub p_tested: usize,
}

/// Pieces shared by the statistic and the spectrum.
struct Projected {
    qx: DMatrix<f64>,
    z_perp: DMatrix<f64>,
}

fn project_out(wm: &WhitenedModel) -> Result<Projected> {
    let qx = orthonormal_columns(&wm.x)?;
    let z_perp = &wm.z - &qx * (qx.transpose() * &wm.z);
    Ok(Projected { qx, z_perp })
}

fn clamp_nonneg(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

pub fn compute_spectrum(wm: &WhitenedModel) -> Result<NullSpectrum> {
    let pr = project_out(wm)?;
    let (xi, _) = sym_eigen_desc(&(wm.z.transpose() * &wm.z));
    let (zeta, _) = sym_eigen_desc(&(pr.z_perp.transpose() * &pr.z_perp));
    let xi = clamp_nonneg(xi);
    let zeta = clamp_nonneg(zeta);
    let scale = xi.first().copied().unwrap_or(0.0).max(1.0);
    if zeta.iter().zip(&xi).any(|(z, x)| *z > x + 1e-8 * scale) {
        log::warn!("projected spectrum does not interlace; numerical trouble in the design");
    }
    Ok(NullSpectrum {
        xi,
        zeta,
        p_tested: wm.tested.len(),
    })
}

/// `{0} ∪ 200 log-spaced values in [1e-5, 1e8]`, divided by `mean(ξ)`.
pub fn default_lambda_grid(xi: &[f64]) -> Vec<f64> {
    let mean = if xi.is_empty() {
        0.0
    } else {
        xi.iter().sum::<f64>() / xi.len() as f64
    };
    let mut g = vec![0.0];
    if mean > 0.0 {
        g.extend(logspace(1e-5, 1e8, 200).into_iter().map(|l| l / mean));
    }
    g
}

/// The sup-over-λ criterion tabulated on a grid:
/// `crit(λ_g) = Σ_q c_gq θ_q − d_g`.
struct Criterion {
    lambdas: Vec<f64>,
    /// Row-major `G × Q'` over kept `ζ` directions.
    c: Vec<f64>,
    d: Vec<f64>,
    q: usize,
}

impl Criterion {
    fn new(zeta_kept: &[f64], xi: &[f64], lambdas: &[f64]) -> Self {
        let q = zeta_kept.len();
        let mut c = Vec::with_capacity(lambdas.len() * q);
        let mut d = Vec::with_capacity(lambdas.len());
        for &l in lambdas {
            c.extend(zeta_kept.iter().map(|&z| l * z / (1.0 + l * z)));
            d.push(xi.iter().map(|&x| (l * x).ln_1p()).sum());
        }
        Criterion {
            lambdas: lambdas.to_vec(),
            c,
            d,
            q,
        }
    }

    /// `(max, argmax λ)`; ties keep the smallest λ.
    fn sup(&self, theta: &[f64]) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for g in 0..self.lambdas.len() {
            let row = &self.c[g * self.q..(g + 1) * self.q];
            let v = row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() - self.d[g];
            if v > best.0 {
                best = (v, self.lambdas[g]);
            }
        }
        best
    }
}

fn kept_directions(zeta: &[f64]) -> Vec<usize> {
    let zmax = zeta.iter().copied().fold(0.0, f64::max);
    (0..zeta.len())
        .filter(|&q| zeta[q] > ZETA_DROP * zmax && zeta[q] > 0.0)
        .collect()
}

fn check_grid(lambdas: &[f64]) -> Result<()> {
    if !lambdas.contains(&0.0) {
        return Err(ProfitError::Config("the λ grid must include 0".into()));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(ProfitError::Config("λ grid values must be finite and >= 0".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlrtResult {
    pub statistic: f64,
    pub vc_part: f64,
    pub fe_part: f64,
    pub lambda_hat: f64,
    pub p_value: Option<f64>,
    pub n_sim: usize,
    pub spectrum: NullSpectrum,
}

/// The statistic `vc_part + fe_part` on a whitened model.
pub fn plrt_statistic(
    wm: &WhitenedModel,
    spectrum: &NullSpectrum,
    lambdas: &[f64],
) -> Result<PlrtResult> {
    check_grid(lambdas)?;
    let pr = project_out(wm)?;
    let w_perp = &wm.w - &pr.qx * (pr.qx.transpose() * &wm.w);

    // Fixed-effect part: ‖Q_xᵀŴ‖² − ‖Q_x1ᵀŴ‖² with X₁ the untested columns.
    let keep: Vec<usize> = (0..wm.x.ncols()).filter(|c| !wm.tested.contains(c)).collect();
    let x1 = wm.x.select_columns(&keep);
    let q1 = orthonormal_columns(&x1)?;
    let fe_part = ((pr.qx.transpose() * &wm.w).norm_squared()
        - (q1.transpose() * &wm.w).norm_squared())
    .max(0.0);

    let (zeta, vecs) = sym_eigen_desc(&(pr.z_perp.transpose() * &pr.z_perp));
    let zeta = clamp_nonneg(zeta);
    let kept = kept_directions(&zeta);
    let (vc_part, lambda_hat) = if kept.is_empty() {
        if !spectrum.xi.is_empty() {
            log::warn!("all projected random-effect eigenvalues vanish; pure fixed-effect test");
        }
        (0.0, 0.0)
    } else {
        let u = vecs.transpose() * (pr.z_perp.transpose() * &w_perp);
        let w2: Vec<f64> = kept.iter().map(|&q| u[q] * u[q] / zeta[q]).collect();
        let zk: Vec<f64> = kept.iter().map(|&q| zeta[q]).collect();
        let crit = Criterion::new(&zk, &spectrum.xi, lambdas);
        let (v, l) = crit.sup(&w2);
        (v.max(0.0), l)
    };
    Ok(PlrtResult {
        statistic: vc_part + fe_part,
        vc_part,
        fe_part,
        lambda_hat,
        p_value: None,
        n_sim: 0,
        spectrum: spectrum.clone(),
    })
}

/// Draws from `sup_λ {Σ λζ_q θ_q/(1+λζ_q) − Σ log(1+λξ_q)} + χ²_p` with
/// `θ_q ~ χ²₁`. Deterministic in `seed`, independent of the thread count.
pub fn simulate_null(
    spectrum: &NullSpectrum,
    n_sim: usize,
    lambdas: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    check_grid(lambdas)?;
    let kept = kept_directions(&spectrum.zeta);
    let zk: Vec<f64> = kept.iter().map(|&q| spectrum.zeta[q]).collect();
    let crit = Criterion::new(&zk, &spectrum.xi, lambdas);
    let p = spectrum.p_tested;
    let n_blocks = n_sim.div_ceil(SIM_BLOCK);
    let q = zk.len();
    let g = crit.lambdas.len();
    // `C` as a `Q × G` matrix so a block of draws is one product.
    let cmat = DMatrix::from_fn(q, g, |j, l| crit.c[l * q + j]);
    let blocks: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, &[tag::NULL_SIM, b as u64]);
            let len = SIM_BLOCK.min(n_sim - b * SIM_BLOCK);
            let mut theta = DMatrix::<f64>::zeros(len, q);
            let mut chi = vec![0.0; len];
            for i in 0..len {
                for j in 0..q {
                    let x: f64 = rng.sample(StandardNormal);
                    theta[(i, j)] = x * x;
                }
                chi[i] = (0..p)
                    .map(|_| {
                        let x: f64 = rng.sample(StandardNormal);
                        x * x
                    })
                    .sum();
            }
            if q == 0 {
                return chi;
            }
            let vals = theta * &cmat;
            (0..len)
                .map(|i| {
                    let sup = (0..g)
                        .map(|l| vals[(i, l)] - crit.d[l])
                        .fold(f64::NEG_INFINITY, f64::max);
                    sup.max(0.0) + chi[i]
                })
                .collect()
        })
        .collect();
    Ok(blocks.concat())
}

/// Proportion of null draws strictly greater than `statistic`.
pub fn p_value(statistic: f64, null: &[f64]) -> Result<f64> {
    if !(statistic >= 0.0) {
        return Err(ProfitError::Config(format!(
            "statistic must be a nonnegative number, got {statistic}"
        )));
    }
    if null.is_empty() {
        return Err(ProfitError::Config("empty null sample".into()));
    }
    Ok(null.iter().filter(|&&d| d > statistic).count() as f64 / null.len() as f64)
}

/// Statistic plus simulated p-value with the default λ grid.
pub fn plrt_test(wm: &WhitenedModel, n_sim: usize, seed: u64) -> Result<PlrtResult> {
    let spectrum = compute_spectrum(wm)?;
    let grid = default_lambda_grid(&spectrum.xi);
    let mut res = plrt_statistic(wm, &spectrum, &grid)?;
    let null = simulate_null(&spectrum, n_sim, &grid, seed)?;
    res.p_value = Some(p_value(res.statistic, &null)?);
    res.n_sim = n_sim;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginal::ProjectedSubject;
    use approx::assert_abs_diff_eq;

    fn single(times: Vec<f64>) -> ProjectedSeries {
        ProjectedSeries {
            k: 0,
            covariate_names: vec![],
            subjects: vec![ProjectedSubject {
                id: "a".into(),
                values: vec![0.0; times.len()],
                times,
                covariates: vec![],
            }],
            basis_hash: String::new(),
        }
    }

    #[test]
    fn knot_counts_follow_formula() {
        let t = |u: usize| (0..u).map(|i| i as f64 / u as f64).collect::<Vec<_>>();
        assert_eq!(knot_rule(&t(30), 1).unwrap().requested, 20);
        assert_eq!(knot_rule(&t(200), 1).unwrap().requested, 40);
        assert_eq!(knot_rule(&t(100), 1).unwrap().requested, 25);
        assert_eq!(knot_rule(&t(10), 1).unwrap().requested, 8);
        let k = knot_rule(&t(100), 1).unwrap();
        assert!(k.knots.windows(2).all(|w| w[1] > w[0]));
        assert!(k.knots[0] > 0.0 && *k.knots.last().unwrap() < 0.99);
    }

    #[test]
    fn design_entries() {
        let d = build_design(&single(vec![0.2, 0.6]), 1, &[0.5]).unwrap();
        assert_eq!(d.x, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 1.0, 0.6]));
        assert_abs_diff_eq!(d.z[(0, 0)], 0.0);
        assert_abs_diff_eq!(d.z[(1, 0)], 0.1, epsilon = 1e-15);
        assert_eq!(truncated_power(0.5, 0.5, 1), 0.0);
        assert_abs_diff_eq!(truncated_power(0.8, 0.5, 2), 0.09, epsilon = 1e-15);
    }

    #[test]
    fn one_column_spectrum() {
        let wm = WhitenedModel {
            w: DVector::zeros(4),
            x: DMatrix::from_element(4, 1, 1.0),
            z: DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 2.0]),
            tested: vec![],
        };
        let s = compute_spectrum(&wm).unwrap();
        assert_abs_diff_eq!(s.xi[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.zeta[0], 2.75, epsilon = 1e-12);
    }

    #[test]
    fn scalar_criterion_closed_form() {
        let crit = Criterion::new(&[1.0], &[1.0], &default_lambda_grid(&[1.0]));
        // Optimum at λ = 3 with value 3 − log 4; the grid gets close.
        let (v, l) = crit.sup(&[4.0]);
        assert!((v - (3.0 - 4f64.ln())).abs() < 1e-3, "{v}");
        assert!((l - 3.0).abs() < 0.3);
        assert_eq!(crit.sup(&[0.5]).0, 0.0);
    }

    #[test]
    fn p_value_edges() {
        let null = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(p_value(4.0, &null).unwrap(), 0.0);
        assert_eq!(p_value(0.0, &null).unwrap(), 0.75);
        assert!(p_value(-1.0, &null).is_err());
    }

    #[test]
    fn zero_zeta_gives_zero_draws() {
        let s = NullSpectrum {
            xi: vec![1.0, 1.0],
            zeta: vec![0.0, 0.0],
            p_tested: 0,
        };
        let d = simulate_null(&s, 2000, &default_lambda_grid(&s.xi), 1).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }
}
