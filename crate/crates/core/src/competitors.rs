//! L2-norm competitor tests on the projected series: the statistic
//! `T = ∫ (η̂ − Ĉ)²` calibrated either by a weighted chi-square mixture
//! (ZC-MC) or by a subject bootstrap of null-centered data (ZC-BT).

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalFunctionalDataset;
use crate::error::{ProfitError, Result, StageExt};
use crate::linalg::simpson;
use crate::marginal::ProjectedSeries;
use crate::prewhiten::{fit_projected_cov, PrewhitenConfig};
use crate::profit::{
    bonferroni, is_constant_series, project_dataset, BasisSummary, DatasetSummary, ProfitConfig,
    Projections, REPORT_SCHEMA,
};
use crate::rng::{derive_seed, substream, tag};
use crate::smoothers::{pspline_1d_from_gram, pspline_1d_with, SplineConfig, SplineGram};

/// Quadrature points on `[0, 1]`.
pub const ZC_QUAD: usize = 201;
/// Basis functions of the mean fit.
pub const ZC_BASIS: usize = 10;
/// Draws per seeded block of the Monte Carlo calibrations.
const BLOCK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZcMethod {
    #[serde(rename = "ZC-MC")]
    MonteCarlo,
    #[serde(rename = "ZC-BT")]
    Bootstrap,
}

impl ZcMethod {
    pub fn tag(self) -> &'static str {
        match self {
            ZcMethod::MonteCarlo => "ZC-MC",
            ZcMethod::Bootstrap => "ZC-BT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcStatistic {
    pub statistic: f64,
    /// `η̂` on the quadrature grid.
    pub eta: Vec<f64>,
    /// Grand mean of the projected values.
    pub c_hat: f64,
    pub n_basis: usize,
}

fn quad_grid() -> Vec<f64> {
    crate::data::unit_grid(ZC_QUAD)
}

fn distinct(times: &[f64]) -> usize {
    let mut u = times.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    u.len()
}

/// `∫₀¹ (η − c)²` by Simpson's rule from `η` on the 201-point grid.
pub fn l2_statistic(eta: &[f64], c_hat: f64) -> f64 {
    let sq: Vec<f64> = eta.iter().map(|e| (e - c_hat).powi(2)).collect();
    simpson(&sq, 0.0, 1.0).max(0.0)
}

/// Penalized 10-function cubic B-spline fit of the pooled `(t, W)` with GCV,
/// compared to the grand mean.
pub fn zc_statistic(ps: &ProjectedSeries) -> Result<ZcStatistic> {
    let t = ps.pooled_times();
    let w = ps.pooled_values();
    zc_statistic_pooled(&t, &w)
}

fn zc_statistic_pooled(t: &[f64], w: &[f64]) -> Result<ZcStatistic> {
    if w.is_empty() {
        return Err(ProfitError::Degenerate("empty projected series".into()));
    }
    let c_hat = w.iter().sum::<f64>() / w.len() as f64;
    let u = distinct(t);
    let mut n_basis = ZC_BASIS;
    if u < ZC_BASIS {
        n_basis = u.max(4);
        log::warn!("only {u} distinct times; mean fit uses {n_basis} basis functions");
    }
    let cfg = SplineConfig::with_basis_count(n_basis);
    let fit = pspline_1d_with(t, w, &vec![1.0; t.len()], &cfg, (0.0, 1.0), None)?;
    let eta: Vec<f64> = quad_grid().iter().map(|&x| fit.eval(x)).collect();
    Ok(ZcStatistic {
        statistic: l2_statistic(&eta, c_hat),
        eta,
        c_hat,
        n_basis,
    })
}

/// `P(Σ ν_r A_r ≥ stat)` with `A_r ~ χ²₁`, from `n_sim` seeded draws.
/// Without positive weights the p-value is 1.
pub fn zc_mc_pvalue(stat: f64, nu: &[f64], n_sim: usize, seed: u64) -> f64 {
    let nu: Vec<f64> = nu.iter().copied().filter(|&v| v > 0.0).collect();
    if nu.is_empty() || n_sim == 0 {
        log::warn!("ZC-MC: no positive mixture weights; p set to 1");
        return 1.0;
    }
    let n_blocks = n_sim.div_ceil(BLOCK);
    let hits: usize = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, &[tag::ZC_MC, b as u64]);
            let len = BLOCK.min(n_sim - b * BLOCK);
            (0..len)
                .filter(|_| {
                    let d: f64 = nu
                        .iter()
                        .map(|&v| {
                            let g: f64 = rng.sample(StandardNormal);
                            v * g * g
                        })
                        .sum();
                    d >= stat
                })
                .count()
        })
        .sum();
    hits as f64 / n_sim as f64
}

/// Subject bootstrap of null-centered data `W − η̂(t) + Ĉ`; the p-value is
/// the share of bootstrap statistics at least `stat`.
pub fn zc_bootstrap_pvalue(ps: &ProjectedSeries, stat: f64, b: usize, seed: u64) -> Result<f64> {
    bootstrap(ps, stat, b, seed, false)
}

/// Same resamples and p-value as [`zc_bootstrap_pvalue`], with each refit
/// assembled from per-subject normal equations instead of the pooled data.
pub fn zc_bootstrap_pvalue_fast(ps: &ProjectedSeries, stat: f64, b: usize, seed: u64) -> Result<f64> {
    bootstrap(ps, stat, b, seed, true)
}

fn bootstrap(ps: &ProjectedSeries, stat: f64, b: usize, seed: u64, fast: bool) -> Result<f64> {
    if b < 100 {
        return Err(ProfitError::Config("the bootstrap needs B >= 100".into()));
    }
    let base = zc_statistic(ps)?;
    let grid = quad_grid();
    let centered: Vec<(Vec<f64>, Vec<f64>)> = ps
        .subjects
        .iter()
        .map(|s| {
            let v = s
                .times
                .iter()
                .zip(&s.values)
                .map(|(&t, &w)| w - crate::linalg::interp_linear(&grid, &base.eta, t) + base.c_hat)
                .collect();
            (s.times.clone(), v)
        })
        .collect();
    let n = centered.len();
    let ms = ps.pooled_values().iter().map(|v| v * v).sum::<f64>() / ps.n_total().max(1) as f64;
    let tol = 1e-12 * (stat.abs() + ms);
    // Per-subject normal equations; a resample's fit only needs their sums.
    let cfg = SplineConfig::with_basis_count(ZC_BASIS);
    let basis = cfg.basis(0.0, 1.0)?;
    let parts: Vec<(SplineGram, f64, usize)> = centered
        .iter()
        .filter(|_| fast)
        .map(|(t, v)| (SplineGram::from_points(&basis, t, v), v.iter().sum(), distinct(t)))
        .collect();
    let stats: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = substream(seed, &[tag::ZC_BT, rep as u64]);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            if fast && idx.iter().map(|&i| parts[i].2).max().unwrap_or(0) >= ZC_BASIS {
                let mut gram = SplineGram::zeros(basis.n_basis());
                let mut sum = 0.0;
                for &i in &idx {
                    gram.add_assign(&parts[i].0);
                    sum += parts[i].1;
                }
                let fit = pspline_1d_from_gram(&basis, &gram, &cfg)?;
                let c_hat = sum / gram.n;
                let eta: Vec<f64> = grid.iter().map(|&x| fit.eval(x)).collect();
                return Ok(l2_statistic(&eta, c_hat));
            }
            let mut t = Vec::new();
            let mut w = Vec::new();
            for &i in &idx {
                t.extend_from_slice(&centered[i].0);
                w.extend_from_slice(&centered[i].1);
            }
            Ok(zc_statistic_pooled(&t, &w)?.statistic)
        })
        .collect();
    let mut hits = 0usize;
    for s in stats {
        if s? >= stat - tol {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcDirection {
    pub k: usize,
    pub statistic: f64,
    pub c_hat: f64,
    pub p_value: f64,
    pub adjusted_p: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcResult {
    pub schema: String,
    pub method: ZcMethod,
    pub k: usize,
    pub directions: Vec<ZcDirection>,
    pub min_p: f64,
    pub global_p: f64,
    pub alpha: f64,
    pub reject: bool,
    pub decision: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub basis: BasisSummary,
    pub warnings: Vec<String>,
}

impl ZcResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn exit_code(&self) -> i32 {
        if self.reject {
            3
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcConfig {
    /// Draws of the chi-square mixture.
    pub n_sim: usize,
    /// Bootstrap samples.
    pub b: usize,
    /// Refit bootstrap samples from summed per-subject normal equations.
    pub fast_bootstrap: bool,
}

impl Default for ZcConfig {
    fn default() -> Self {
        ZcConfig {
            n_sim: 10_000,
            b: 1000,
            fast_bootstrap: false,
        }
    }
}

/// Run a competitor on precomputed projections.
pub fn run_zc_on(
    ds: &LongitudinalFunctionalDataset,
    proj: &Projections,
    method: ZcMethod,
    cfg: &ProfitConfig,
    zc: &ZcConfig,
) -> Result<ZcResult> {
    let pw = PrewhitenConfig {
        pve_t: cfg.pve_t,
        ..cfg.prewhiten.clone()
    };
    let outcomes: Vec<(ZcDirection, Vec<String>)> = proj
        .series
        .par_iter()
        .map(|ps| -> Result<(ZcDirection, Vec<String>)> {
            let k = ps.k;
            if is_constant_series(ps) {
                return Ok((
                    ZcDirection {
                        k: k + 1,
                        statistic: 0.0,
                        c_hat: ps.pooled_values().first().copied().unwrap_or(0.0),
                        p_value: 1.0,
                        adjusted_p: 1.0,
                        skipped: true,
                    },
                    vec![format!("direction {} has a constant projected series; p set to 1", k + 1)],
                ));
            }
            let st = zc_statistic(ps).stage("zc statistic")?;
            let mut warnings = Vec::new();
            let seed = derive_seed(cfg.seed, &[k as u64]);
            let p = match method {
                ZcMethod::MonteCarlo => {
                    let model = fit_projected_cov(ps, &pw).stage("prewhiten")?;
                    if model.l() == 0 {
                        warnings.push(format!(
                            "direction {}: no covariance components; ZC-MC p set to 1",
                            k + 1
                        ));
                    }
                    zc_mc_pvalue(st.statistic, &model.nu, zc.n_sim, seed)
                }
                ZcMethod::Bootstrap => {
                    bootstrap(ps, st.statistic, zc.b, seed, zc.fast_bootstrap).stage("bootstrap")?
                }
            };
            Ok((
                ZcDirection {
                    k: k + 1,
                    statistic: st.statistic,
                    c_hat: st.c_hat,
                    p_value: p,
                    adjusted_p: p,
                    skipped: false,
                },
                warnings,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = proj.warnings.clone();
    let mut directions = Vec::new();
    for (d, w) in outcomes {
        directions.push(d);
        warnings.extend(w);
    }
    let ps: Vec<f64> = directions.iter().map(|d| d.p_value).collect();
    let b = bonferroni(&ps, cfg.alpha)?;
    for (d, a) in directions.iter_mut().zip(&b.adjusted) {
        d.adjusted_p = *a;
    }
    Ok(ZcResult {
        schema: REPORT_SCHEMA.into(),
        method,
        k: directions.len(),
        min_p: ps.iter().copied().fold(1.0, f64::min),
        directions,
        global_p: b.global_p,
        alpha: cfg.alpha,
        reject: b.reject,
        decision: if b.reject { "reject" } else { "retain" }.into(),
        seed: cfg.seed,
        dataset: DatasetSummary {
            n_subjects: ds.n_subjects(),
            n_curves: ds.n_curves(),
            grid_len: ds.grid_len(),
            source_hash: ds.metadata.source_hash.clone(),
        },
        basis: BasisSummary {
            eigenvalues: proj.basis.eigenvalues.clone(),
            pve_achieved: proj.basis.pve_achieved,
            total_trace: proj.basis.total_trace,
            bandwidth: proj.bandwidth,
            hash: proj.basis.hash(),
        },
        warnings,
    })
}

/// Project the dataset and run a competitor test.
pub fn run_zc(
    ds: &LongitudinalFunctionalDataset,
    method: ZcMethod,
    cfg: &ProfitConfig,
    zc: &ZcConfig,
) -> Result<ZcResult> {
    cfg.validate()?;
    let proj = project_dataset(ds, cfg)?;
    run_zc_on(ds, &proj, method, cfg, zc)
}
