//! End-to-end test: mean, marginal covariance, eigenbasis, and one pseudo
//! likelihood ratio test per direction, combined by Bonferroni.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalFunctionalDataset;
use crate::error::{ProfitError, Result, StageExt};
use crate::marginal::{
    eigen_basis, estimate_mean, quasi_project, raw_marginal_covariance,
    smooth_marginal_covariance, MarginalBasis, MeanConfig, ProjectedSeries, WeightScheme,
};
use crate::plrt::{
    build_design, compute_spectrum, default_lambda_grid, knot_rule, p_value, plrt_statistic,
    simulate_null, whiten,
};
use crate::prewhiten::{assemble_blocks, fit_projected_cov, PrewhitenConfig, ProjectedCovModel};
use crate::rng::derive_seed;
use crate::smoothers::KernelConfig;

pub const REPORT_SCHEMA: &str = "profit-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitConfig {
    pub pve_s: f64,
    pub pve_t: f64,
    pub alpha: f64,
    /// Order of the truncated power basis.
    pub p: usize,
    pub n_sim: usize,
    pub seed: u64,
    pub weight_scheme: WeightScheme,
    /// Subject covariates adjusted for (never tested).
    pub covariates: Vec<String>,
    /// Upper bound on the number of directions.
    pub max_k: usize,
    pub mean: MeanConfig,
    pub cov_kernel: KernelConfig,
    pub prewhiten: PrewhitenConfig,
    /// Record stage timings in the report (makes reports run-dependent).
    pub record_timings: bool,
}

impl Default for ProfitConfig {
    fn default() -> Self {
        ProfitConfig {
            pve_s: 0.9,
            pve_t: 0.9,
            alpha: 0.05,
            p: 1,
            n_sim: 10_000,
            seed: 0,
            weight_scheme: WeightScheme::Pooled,
            covariates: Vec::new(),
            max_k: 15,
            mean: MeanConfig::default(),
            cov_kernel: KernelConfig::default(),
            prewhiten: PrewhitenConfig::default(),
            record_timings: false,
        }
    }
}

impl ProfitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pve_s", self.pve_s), ("pve_t", self.pve_t)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ProfitError::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ProfitError::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.p == 0 {
            return Err(ProfitError::Config("p must be at least 1".into()));
        }
        if self.n_sim < 1000 {
            return Err(ProfitError::Config("n_sim must be at least 1000".into()));
        }
        if self.max_k == 0 {
            return Err(ProfitError::Config("max_k must be at least 1".into()));
        }
        self.cov_kernel.validate()
    }
}

/// Reject iff `min p < α/K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonferroniOutcome {
    pub reject: bool,
    pub adjusted: Vec<f64>,
    pub global_p: f64,
}

pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<BonferroniOutcome> {
    if p_values.is_empty() {
        return Err(ProfitError::Config("no p-values to combine".into()));
    }
    if p_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ProfitError::Config("p-values must lie in [0, 1]".into()));
    }
    let k = p_values.len() as f64;
    let min = p_values.iter().copied().fold(1.0, f64::min);
    Ok(BonferroniOutcome {
        reject: min < alpha / k,
        adjusted: p_values.iter().map(|p| (k * p).min(1.0)).collect(),
        global_p: (k * min).min(1.0),
    })
}

/// Everything up to the projected series, shared with the competitor tests.
#[derive(Debug, Clone)]
pub struct Projections {
    pub basis: MarginalBasis,
    pub series: Vec<ProjectedSeries>,
    pub bandwidth: Option<f64>,
    pub warnings: Vec<String>,
}

/// Mean, marginal covariance, basis (capped at `max_k`) and projections.
pub fn project_dataset(ds: &LongitudinalFunctionalDataset, cfg: &ProfitConfig) -> Result<Projections> {
    ds.ensure_valid().stage("validate")?;
    let mean = estimate_mean(ds, &cfg.mean, &cfg.covariates).stage("mean")?;
    let mut warnings = Vec::new();
    if !mean.converged {
        warnings.push(format!(
            "mean backfitting stopped after {} iterations without converging",
            mean.iterations
        ));
    }
    let raw = raw_marginal_covariance(ds, &mean, cfg.weight_scheme).stage("covariance")?;
    let scale = ds.curves().flat_map(|(_, _, y)| y.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    if raw.raw.amax() <= 1e-20 * scale * scale + 1e-300 {
        return Err(ProfitError::Degenerate("no variation to project onto".into()).in_stage("basis"));
    }
    let mc = smooth_marginal_covariance(&raw, &cfg.cov_kernel).stage("covariance")?;
    let basis = eigen_basis(&mc, cfg.pve_s).stage("basis")?;
    project_with_basis(ds, basis, mc.bandwidth, cfg, warnings)
}

/// Projections onto a given basis (for example the true eigenfunctions in
/// simulations).
pub fn project_with_basis(
    ds: &LongitudinalFunctionalDataset,
    mut basis: MarginalBasis,
    bandwidth: Option<f64>,
    cfg: &ProfitConfig,
    mut warnings: Vec<String>,
) -> Result<Projections> {
    if basis.k() == 0 {
        return Err(ProfitError::Degenerate("no variation to project onto".into()).in_stage("basis"));
    }
    if basis.k() > cfg.max_k {
        let msg = format!("K capped at {} (PVE rule asked for {})", cfg.max_k, basis.k());
        log::warn!("{msg}");
        warnings.push(msg);
        basis.truncate(cfg.max_k);
    }
    let series = (0..basis.k())
        .map(|k| quasi_project(ds, &basis, k, &cfg.covariates))
        .collect::<Result<Vec<_>>>()
        .stage("projection")?;
    Ok(Projections {
        basis,
        series,
        bandwidth,
        warnings,
    })
}

/// Whether a projected series carries no usable variation.
pub fn is_constant_series(ps: &ProjectedSeries) -> bool {
    let v = ps.pooled_values();
    let scale = v.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().all(|x| (x - mean).abs() <= 1e-12 * scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub q: usize,
    pub xi_max: f64,
    pub zeta_max: f64,
    pub zeta_positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    pub k: usize,
    pub eigenvalue: f64,
    pub statistic: f64,
    pub vc_part: f64,
    pub fe_part: f64,
    pub lambda_hat: f64,
    pub p_value: f64,
    pub adjusted_p: f64,
    pub skipped: bool,
    pub n_components_t: usize,
    pub sigma2: f64,
    pub spectrum: Option<SpectrumSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_subjects: usize,
    pub n_curves: usize,
    pub grid_len: usize,
    pub source_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSummary {
    pub eigenvalues: Vec<f64>,
    pub pve_achieved: f64,
    pub total_trace: f64,
    pub bandwidth: Option<f64>,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub projection_seconds: f64,
    pub testing_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitReport {
    pub schema: String,
    pub method: String,
    pub k: usize,
    pub directions: Vec<DirectionResult>,
    pub min_p: f64,
    pub global_p: f64,
    pub alpha: f64,
    pub reject: bool,
    pub decision: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub basis: BasisSummary,
    pub config: ProfitConfig,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings: Option<Timings>,
}

impl ProfitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// 0 for retain, 3 for reject.
    pub fn exit_code(&self) -> i32 {
        if self.reject {
            3
        } else {
            0
        }
    }
}

struct DirectionOutcome {
    result: DirectionResult,
    warnings: Vec<String>,
}

/// Test one projected direction.
pub fn test_direction(
    ps: &ProjectedSeries,
    eigenvalue: f64,
    cfg: &ProfitConfig,
) -> Result<(DirectionResult, Option<ProjectedCovModel>, Vec<String>)> {
    let o = test_direction_inner(ps, eigenvalue, cfg)?;
    Ok((o.0.result, o.1, o.0.warnings))
}

fn test_direction_inner(
    ps: &ProjectedSeries,
    eigenvalue: f64,
    cfg: &ProfitConfig,
) -> Result<(DirectionOutcome, Option<ProjectedCovModel>)> {
    let k = ps.k;
    if is_constant_series(ps) {
        let msg = format!("direction {} has a constant projected series; p set to 1", k + 1);
        log::warn!("{msg}");
        return Ok((
            DirectionOutcome {
                result: DirectionResult {
                    k: k + 1,
                    eigenvalue,
                    statistic: 0.0,
                    vc_part: 0.0,
                    fe_part: 0.0,
                    lambda_hat: 0.0,
                    p_value: 1.0,
                    adjusted_p: 1.0,
                    skipped: true,
                    n_components_t: 0,
                    sigma2: 0.0,
                    spectrum: None,
                },
                warnings: vec![msg],
            },
            None,
        ));
    }
    let pw = PrewhitenConfig {
        pve_t: cfg.pve_t,
        ..cfg.prewhiten.clone()
    };
    let model = fit_projected_cov(ps, &pw).stage("prewhiten")?;
    let mut warnings = Vec::new();
    if model.sigma2_floored {
        warnings.push(format!(
            "direction {}: noise variance estimate floored at {:.3e}",
            k + 1,
            model.sigma2
        ));
    }
    let blocks = assemble_blocks(ps, &model).stage("prewhiten")?;
    let knots = knot_rule(&ps.pooled_times(), cfg.p).stage("design")?;
    let design = build_design(ps, cfg.p, &knots.knots).stage("design")?;
    let wm = whiten(&design, ps, &blocks).stage("whiten")?;
    let spectrum = compute_spectrum(&wm).stage("plrt")?;
    let grid = default_lambda_grid(&spectrum.xi);
    let stat = plrt_statistic(&wm, &spectrum, &grid).stage("plrt")?;
    let null = simulate_null(&spectrum, cfg.n_sim, &grid, derive_seed(cfg.seed, &[k as u64]))
        .stage("null simulation")?;
    let p = p_value(stat.statistic, &null).stage("null simulation")?;
    let summary = SpectrumSummary {
        q: spectrum.xi.len(),
        xi_max: spectrum.xi.first().copied().unwrap_or(0.0),
        zeta_max: spectrum.zeta.first().copied().unwrap_or(0.0),
        zeta_positive: spectrum.zeta.iter().filter(|&&z| z > 0.0).count(),
    };
    Ok((
        DirectionOutcome {
            result: DirectionResult {
                k: k + 1,
                eigenvalue,
                statistic: stat.statistic,
                vc_part: stat.vc_part,
                fe_part: stat.fe_part,
                lambda_hat: stat.lambda_hat,
                p_value: p,
                adjusted_p: p,
                skipped: false,
                n_components_t: model.l(),
                sigma2: model.sigma2,
                spectrum: Some(summary),
            },
            warnings,
        },
        Some(model),
    ))
}

/// Test every direction of precomputed projections.
pub fn test_projections(
    ds: &LongitudinalFunctionalDataset,
    proj: &Projections,
    cfg: &ProfitConfig,
) -> Result<ProfitReport> {
    let outcomes: Vec<DirectionOutcome> = proj
        .series
        .par_iter()
        .map(|ps| test_direction_inner(ps, proj.basis.eigenvalues[ps.k], cfg).map(|o| o.0))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = proj.warnings.clone();
    let mut directions = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        warnings.extend(o.warnings);
        directions.push(o.result);
    }
    let ps: Vec<f64> = directions.iter().map(|d| d.p_value).collect();
    let b = bonferroni(&ps, cfg.alpha)?;
    for (d, a) in directions.iter_mut().zip(&b.adjusted) {
        d.adjusted_p = *a;
    }
    Ok(ProfitReport {
        schema: REPORT_SCHEMA.into(),
        method: "PROFIT".into(),
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
        config: cfg.clone(),
        warnings,
        timings: None,
    })
}

/// Run the full test on a dataset.
pub fn run_profit(ds: &LongitudinalFunctionalDataset, cfg: &ProfitConfig) -> Result<ProfitReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    let proj = project_dataset(ds, cfg)?;
    let t1 = Instant::now();
    let mut report = test_projections(ds, &proj, cfg)?;
    if cfg.record_timings {
        report.timings = Some(Timings {
            projection_seconds: (t1 - t0).as_secs_f64(),
            testing_seconds: t1.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonferroni_examples() {
        let b = bonferroni(&[0.01, 0.5, 0.9], 0.05).unwrap();
        assert!(b.reject);
        assert!((b.adjusted[0] - 0.03).abs() < 1e-15);
        assert_eq!(&b.adjusted[1..], &[1.0, 1.0]);
        assert!(bonferroni(&[0.02, 0.02], 0.05).unwrap().reject);
        let one = bonferroni(&[0.04], 0.05).unwrap();
        assert!(one.reject && one.adjusted[0] == 0.04);
        assert!(!bonferroni(&[0.03, 0.2], 0.05).unwrap().reject);
        assert!(bonferroni(&[], 0.05).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ProfitConfig::default();
        assert!(c.validate().is_ok());
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        c = ProfitConfig { pve_s: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
