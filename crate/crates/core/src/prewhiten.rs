//! Mean and covariance of a projected series, and the per-subject residual
//! covariance blocks with their inverse square roots.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::unit_grid;
use crate::error::{ProfitError, Result};
use crate::linalg::{interp_linear, inv_sqrt_psd, sym_eigen_desc};
use crate::marginal::ProjectedSeries;
use crate::smoothers::{
    local_linear_1d, local_linear_2d, pspline_1d_with, pspline_2d, KernelConfig, PenaltySpec,
    SplineConfig, Tensor2dOptions, WeightedPoint2,
};

/// Points of the `t` grid on which the covariance is represented.
pub const T_GRID: usize = 101;

/// Relative eigenvalue floor used when inverting blocks.
pub const BLOCK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovSmoother {
    /// Penalized splines for the mean, the covariance surface and the
    /// variance function.
    PSpline {
        mean: SplineConfig,
        cov: SplineConfig,
    },
    /// Local-linear kernel smoothers with fixed bandwidths.
    LocalLinear { h_mean: f64, h_cov: f64 },
}

impl Default for CovSmoother {
    fn default() -> Self {
        CovSmoother::PSpline {
            mean: SplineConfig::default(),
            cov: SplineConfig::default(),
        }
    }
}

/// How the penalty of the covariance surface is tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovTuning {
    /// GCV over all raw covariance pairs.
    Gcv,
    /// Cross-validation with subjects split into this many folds
    /// (subject `i` goes to fold `i mod folds`).
    SubjectFolds(usize),
}

impl Default for CovTuning {
    fn default() -> Self {
        CovTuning::SubjectFolds(5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrewhitenConfig {
    pub pve_t: f64,
    pub smoother: CovSmoother,
    #[serde(default)]
    pub cov_tuning: CovTuning,
    /// Noise variance floor relative to the total projected variance.
    pub noise_floor_rel: f64,
}

impl Default for PrewhitenConfig {
    fn default() -> Self {
        PrewhitenConfig {
            pve_t: 0.9,
            smoother: CovSmoother::default(),
            cov_tuning: CovTuning::default(),
            noise_floor_rel: 1e-6,
        }
    }
}

/// Fitted mean, covariance and noise variance of one projected series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedCovModel {
    pub grid_t: Vec<f64>,
    /// `η̂` on `grid_t`.
    pub eta: Vec<f64>,
    /// Coefficients of the covariates carried by the series.
    pub covariate_coef: Vec<f64>,
    /// Smoothed covariance `γ̂` on `grid_t × grid_t`.
    pub gamma: DMatrix<f64>,
    /// Retained eigenvalues `ν̂`, descending.
    pub nu: Vec<f64>,
    /// `L × |grid_t|` eigenfunctions, unit norm under weight `1/|grid_t|`.
    pub psi: DMatrix<f64>,
    pub sigma2: f64,
    pub sigma2_floored: bool,
    pub pve_t: f64,
    /// Sample variance of the projected values.
    pub total_variance: f64,
}

impl ProjectedCovModel {
    pub fn l(&self) -> usize {
        self.nu.len()
    }

    pub fn eta_at(&self, t: f64) -> f64 {
        interp_linear(&self.grid_t, &self.eta, t)
    }

    /// `η̂(t) + zᵀα̂`.
    pub fn fitted(&self, t: f64, z: &[f64]) -> f64 {
        self.eta_at(t) + z.iter().zip(&self.covariate_coef).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn psi_at(&self, l: usize, t: f64) -> f64 {
        let row: Vec<f64> = self.psi.row(l).iter().copied().collect();
        interp_linear(&self.grid_t, &row, t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Estimate `η_k`, `γ_k` (truncated to `L_k` components by `pve_t`) and
/// `σ²_{e,k}` from a projected series.
pub fn fit_projected_cov(ps: &ProjectedSeries, cfg: &PrewhitenConfig) -> Result<ProjectedCovModel> {
    if !(cfg.pve_t > 0.0 && cfg.pve_t <= 1.0) {
        return Err(ProfitError::Config(format!("pve_t must lie in (0, 1], got {}", cfg.pve_t)));
    }
    let t = ps.pooled_times();
    let w = ps.pooled_values();
    let mut uniq = t.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    if uniq.len() < 3 {
        return Err(ProfitError::Degenerate("insufficient longitudinal design".into()));
    }
    if ps.subjects.iter().filter(|s| s.times.len() >= 2).count() < 2 {
        return Err(ProfitError::Degenerate(
            "insufficient longitudinal design: fewer than 2 subjects with repeated visits".into(),
        ));
    }
    let n = t.len();
    let q = ps.covariate_names.len();
    let total_variance = variance(&w);
    let grid_t = unit_grid(T_GRID);
    let ones = vec![1.0; n];

    // Mean with unpenalized covariate columns.
    let zmat = (q > 0).then(|| {
        let mut z = DMatrix::zeros(n, q);
        let mut row = 0;
        for s in &ps.subjects {
            for _ in &s.times {
                for c in 0..q {
                    z[(row, c)] = s.covariates[c];
                }
                row += 1;
            }
        }
        z
    });
    let (eta, covariate_coef) = match &cfg.smoother {
        CovSmoother::PSpline { mean, .. } => {
            let f = pspline_1d_with(&t, &w, &ones, mean, (0.0, 1.0), zmat.as_ref())?;
            (grid_t.iter().map(|&g| f.eval(g)).collect::<Vec<_>>(), f.extra_coef)
        }
        CovSmoother::LocalLinear { h_mean, .. } => {
            if q > 0 {
                return Err(ProfitError::Config(
                    "the local-linear covariance path does not support covariates".into(),
                ));
            }
            let f = local_linear_1d(&t, &w, &ones, &grid_t, &KernelConfig::fixed(*h_mean))?;
            (f.values, Vec::new())
        }
    };

    // Residuals per subject.
    let resid: Vec<Vec<f64>> = ps
        .subjects
        .iter()
        .map(|s| {
            s.times
                .iter()
                .zip(&s.values)
                .map(|(&tt, &v)| {
                    let zc: f64 = s.covariates.iter().zip(&covariate_coef).map(|(a, b)| a * b).sum();
                    v - interp_linear(&grid_t, &eta, tt) - zc
                })
                .collect()
        })
        .collect();

    let n_folds = match cfg.cov_tuning {
        CovTuning::Gcv => 1,
        CovTuning::SubjectFolds(k) => k.min(ps.subjects.len()).max(1),
    };
    let mut pairs = Vec::new();
    let mut folds = Vec::new();
    let mut diag_t = Vec::with_capacity(n);
    let mut diag_v = Vec::with_capacity(n);
    for (i, (s, r)) in ps.subjects.iter().zip(&resid).enumerate() {
        for j in 0..s.times.len() {
            diag_t.push(s.times[j]);
            diag_v.push(r[j] * r[j]);
            for jj in 0..s.times.len() {
                if jj != j {
                    pairs.push(WeightedPoint2::new(s.times[j], s.times[jj], r[j] * r[jj], 1.0));
                    folds.push(i % n_folds);
                }
            }
        }
    }

    let g = T_GRID;
    let (gamma, var_fn) = match &cfg.smoother {
        CovSmoother::PSpline { cov, mean } => {
            let fit = pspline_2d(
                &pairs,
                cov,
                cov,
                &Tensor2dOptions {
                    domain1: Some((0.0, 1.0)),
                    domain2: Some((0.0, 1.0)),
                    tied: true,
                    folds: (n_folds >= 2).then_some(folds),
                },
            )?;
            let gm = fit.on_grid(&grid_t, &grid_t);
            let vf = pspline_1d_with(&diag_t, &diag_v, &ones, mean, (0.0, 1.0), None)?;
            (gm, grid_t.iter().map(|&x| vf.eval(x)).collect::<Vec<f64>>())
        }
        CovSmoother::LocalLinear { h_cov, h_mean } => {
            let eval: Vec<(f64, f64)> = (0..g * g).map(|k| (grid_t[k / g], grid_t[k % g])).collect();
            let f = local_linear_2d(&pairs, &eval, &KernelConfig::fixed(*h_cov))?;
            let gm = DMatrix::from_row_slice(g, g, &f.values);
            let vf = local_linear_1d(&diag_t, &diag_v, &ones, &grid_t, &KernelConfig::fixed(*h_mean))?;
            (gm, vf.values)
        }
    };
    let gamma = (&gamma + gamma.transpose()) * 0.5;

    let (vals, vecs) = sym_eigen_desc(&(&gamma / g as f64));
    let positive: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = positive.iter().sum();
    let mut l = 0;
    let mean_sq = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    if total > 1e-12 * total_variance.max(1e-10 * mean_sq).max(f64::MIN_POSITIVE) {
        let mut cum = 0.0;
        for &v in &positive {
            if v <= 0.0 {
                break;
            }
            cum += v;
            l += 1;
            if cum / total >= cfg.pve_t - 1e-12 {
                break;
            }
        }
    }
    let scale = (g as f64).sqrt();
    let psi = DMatrix::from_fn(l, g, |k, j| vecs[(j, k)] * scale);

    let floor = if total_variance > 0.0 {
        cfg.noise_floor_rel * total_variance
    } else {
        1e-12
    };
    let raw_sigma2 = (0..g).map(|i| var_fn[i] - gamma[(i, i)]).sum::<f64>() / g as f64;
    let sigma2_floored = !(raw_sigma2 > floor);
    if sigma2_floored && total_variance > 0.0 {
        log::warn!("projected noise variance estimate {raw_sigma2:.3e} floored at {floor:.3e}");
    }
    Ok(ProjectedCovModel {
        grid_t,
        eta,
        covariate_coef,
        gamma,
        nu: positive[..l].to_vec(),
        psi,
        sigma2: raw_sigma2.max(floor),
        sigma2_floored,
        pve_t: cfg.pve_t,
        total_variance,
    })
}

/// Per-subject covariance blocks and their inverse square roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCovariance {
    pub blocks: Vec<DMatrix<f64>>,
    pub inv_sqrt: Vec<DMatrix<f64>>,
    /// Absolute eigenvalue floor applied per block.
    pub floors: Vec<f64>,
}

/// Inverse square root of one block with the relative floor
/// [`BLOCK_FLOOR`].
pub fn block_inv_sqrt(block: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    inv_sqrt_psd(block, BLOCK_FLOOR)
}

/// Assemble `Σ_ℓ ν̂_ℓ ψ̂_ℓ(t_ij) ψ̂_ℓ(t_ij′) + σ̂² 1(j = j′)` for every subject.
pub fn assemble_blocks(ps: &ProjectedSeries, model: &ProjectedCovModel) -> Result<BlockCovariance> {
    let mut blocks = Vec::with_capacity(ps.subjects.len());
    let mut inv = Vec::with_capacity(ps.subjects.len());
    let mut floors = Vec::with_capacity(ps.subjects.len());
    for s in &ps.subjects {
        let m = s.times.len();
        let psi = DMatrix::from_fn(model.l(), m, |l, j| model.psi_at(l, s.times[j]));
        let mut b = DMatrix::from_diagonal_element(m, m, model.sigma2);
        for l in 0..model.l() {
            let row = psi.row(l);
            b += row.transpose() * row * model.nu[l];
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(ProfitError::Validation(format!(
                "non-finite covariance block for subject {}",
                s.id
            )));
        }
        let (si, floor) = block_inv_sqrt(&b).map_err(|e| {
            ProfitError::Degenerate(format!("covariance block for subject {}: {e}", s.id))
        })?;
        blocks.push(b);
        inv.push(si);
        floors.push(floor);
    }
    Ok(BlockCovariance {
        blocks,
        inv_sqrt: inv,
        floors,
    })
}

/// Local-linear alternative path with the given bandwidths.
pub fn local_linear_config(h_mean: f64, h_cov: f64) -> PrewhitenConfig {
    PrewhitenConfig {
        smoother: CovSmoother::LocalLinear { h_mean, h_cov },
        ..Default::default()
    }
}

/// P-spline path with fixed penalties (no GCV), mainly for tests.
pub fn fixed_penalty_config(lambda: f64) -> PrewhitenConfig {
    let c = SplineConfig::default().with_penalty(PenaltySpec::Fixed(lambda));
    PrewhitenConfig {
        smoother: CovSmoother::PSpline { mean: c.clone(), cov: c },
        ..Default::default()
    }
}
