//! Bivariate mean, marginal covariance of the demeaned curves, its
//! eigenbasis, and quasi-projections of the curves onto that basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BivariateSurface, LongitudinalFunctionalDataset};
use crate::error::{ProfitError, Result};
use crate::linalg::sym_eigen_desc;
use crate::smoothers::{
    local_linear_2d_grid, pspline_1d_with, KernelConfig, SandwichFit, SplineConfig,
};

/// Number of points of the `t` grid used to tabulate surfaces in reports.
pub const T_GRID_LEN: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `v_i = 1 / Σ m_i`.
    #[default]
    Pooled,
    /// `v_i = 1 / (n m_i)`.
    PerSubject,
}

impl WeightScheme {
    pub fn weights(self, visits: &[usize]) -> Vec<f64> {
        let n = visits.len() as f64;
        let total: usize = visits.iter().sum();
        visits
            .iter()
            .map(|&m| match self {
                WeightScheme::Pooled => 1.0 / total as f64,
                WeightScheme::PerSubject => 1.0 / (n * m as f64),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanConfig {
    pub spline_s: SplineConfig,
    pub spline_t: SplineConfig,
    /// Relative change in the covariate effects that ends backfitting.
    pub backfit_tol: f64,
    pub backfit_max_iter: usize,
}

impl Default for MeanConfig {
    fn default() -> Self {
        MeanConfig {
            spline_s: SplineConfig::default(),
            spline_t: SplineConfig::default(),
            backfit_tol: 1e-6,
            backfit_max_iter: 50,
        }
    }
}

/// Effect `α(s)` of one subject-level covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffect {
    pub name: String,
    /// Covariate mean over curves; effects act on the centered covariate.
    pub center: f64,
    /// `α̂` on the dataset grid.
    pub alpha: Vec<f64>,
}

/// Fitted mean `μ̂(s, t)` and optional covariate effects.
#[derive(Debug, Clone)]
pub struct MeanEstimate {
    pub fit: SandwichFit,
    pub covariates: Vec<CovariateEffect>,
    pub converged: bool,
    pub iterations: usize,
}

impl MeanEstimate {
    /// `μ̂(·, t)` on the fitting grid.
    pub fn curve_at(&self, t: f64) -> Vec<f64> {
        self.fit.curve_at(t)
    }

    /// Full fitted curve for a visit at `t` of a subject with covariate
    /// values `z` (in the order of [`MeanEstimate::covariates`]).
    pub fn fitted(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut c = self.curve_at(t);
        for (eff, &zv) in self.covariates.iter().zip(z) {
            let dz = zv - eff.center;
            for (v, a) in c.iter_mut().zip(&eff.alpha) {
                *v += dz * a;
            }
        }
        c
    }

    /// `μ̂` tabulated on `grid_s × [0, 1]` (101 points in `t`).
    pub fn surface(&self, grid_s: &[f64]) -> Result<BivariateSurface> {
        let grid_t = crate::data::unit_grid(T_GRID_LEN);
        let cols: Vec<Vec<f64>> = grid_t.iter().map(|&t| self.curve_at(t)).collect();
        let values = (0..grid_s.len())
            .flat_map(|i| cols.iter().map(move |c| c[i]))
            .collect();
        BivariateSurface::new(grid_s.to_vec(), grid_t, values)
    }

    /// `α̂(s)` for covariate `j` as a one-column surface.
    pub fn alpha_surface(&self, grid_s: &[f64], j: usize) -> Result<BivariateSurface> {
        BivariateSurface::new(grid_s.to_vec(), vec![0.0], self.covariates[j].alpha.clone())
    }
}

fn covariate_matrix(ds: &LongitudinalFunctionalDataset, names: &[String]) -> Result<DMatrix<f64>> {
    let n = ds.n_curves();
    let mut z = DMatrix::zeros(n, names.len());
    let mut row = 0;
    for s in &ds.subjects {
        for _ in 0..s.n_visits() {
            for (j, name) in names.iter().enumerate() {
                z[(row, j)] = *s.covariates.get(name).ok_or_else(|| {
                    ProfitError::Validation(format!(
                        "subject {} has no covariate {name:?}",
                        s.id
                    ))
                })?;
            }
            row += 1;
        }
    }
    Ok(z)
}

/// Stack every curve as a row of an `N × R` matrix (subject-major).
pub fn curve_matrix(ds: &LongitudinalFunctionalDataset) -> DMatrix<f64> {
    let n = ds.n_curves();
    let r = ds.grid_len();
    let mut y = DMatrix::zeros(n, r);
    for (row, (_, _, c)) in ds.curves().enumerate() {
        for (j, &v) in c.iter().enumerate() {
            y[(row, j)] = v;
        }
    }
    y
}

/// Smooth the pooled curves into `μ̂(s, t)`. With `covariates` non-empty,
/// `α̂(s)` for each named subject covariate is estimated by backfitting.
pub fn estimate_mean(
    ds: &LongitudinalFunctionalDataset,
    cfg: &MeanConfig,
    covariates: &[String],
) -> Result<MeanEstimate> {
    ds.ensure_valid()?;
    let y = curve_matrix(ds);
    let t = ds.pooled_times();
    let grid = &ds.grid_s;
    if covariates.is_empty() {
        let fit = SandwichFit::fit(&y, &t, grid, &cfg.spline_t, &cfg.spline_s, ds.domain_t)?;
        return Ok(MeanEstimate {
            fit,
            covariates: Vec::new(),
            converged: true,
            iterations: 0,
        });
    }

    let mut z = covariate_matrix(ds, covariates)?;
    let n = z.nrows();
    let q = z.ncols();
    let centers: Vec<f64> = (0..q).map(|j| z.column(j).sum() / n as f64).collect();
    for j in 0..q {
        z.column_mut(j).add_scalar_mut(-centers[j]);
    }
    let ztz = z.transpose() * &z;
    let ztz_chol = ztz.cholesky().ok_or_else(|| {
        ProfitError::Rank("covariates are constant or collinear across subjects".into())
    })?;

    let r = grid.len();
    // Rows: covariates, columns: grid.
    let mut alpha = DMatrix::<f64>::zeros(q, r);
    let mut converged = false;
    let mut iterations = 0;
    let ones = vec![1.0; r];
    for it in 1..=cfg.backfit_max_iter.max(1) {
        iterations = it;
        let partial = &y - &z * &alpha;
        let f = SandwichFit::fit(&partial, &t, grid, &cfg.spline_t, &cfg.spline_s, ds.domain_t)?;
        let mut resid = y.clone();
        for i in 0..n {
            let c = f.curve_at(t[i]);
            for j in 0..r {
                resid[(i, j)] -= c[j];
            }
        }
        let raw = ztz_chol.solve(&(z.transpose() * resid));
        let mut next = DMatrix::zeros(q, r);
        for c in 0..q {
            let row: Vec<f64> = raw.row(c).iter().copied().collect();
            let sm = pspline_1d_with(grid, &row, &ones, &cfg.spline_s, (grid[0], grid[r - 1]), None)?;
            for j in 0..r {
                next[(c, j)] = sm.eval(grid[j]);
            }
        }
        let change = (&next - &alpha).norm() / alpha.norm().max(1e-12);
        alpha = next;
        if change < cfg.backfit_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("mean backfitting did not converge in {iterations} iterations");
    }
    // Final mean given the converged effects.
    let partial = &y - &z * &alpha;
    let fit = SandwichFit::fit(&partial, &t, grid, &cfg.spline_t, &cfg.spline_s, ds.domain_t)?;
    Ok(MeanEstimate {
        fit,
        covariates: covariates
            .iter()
            .enumerate()
            .map(|(c, name)| CovariateEffect {
                name: name.clone(),
                center: centers[c],
                alpha: alpha.row(c).iter().copied().collect(),
            })
            .collect(),
        converged,
        iterations,
    })
}

/// Demeaned curves `Ỹ = Y − μ̂ (− covariate term)` as an `N × R` matrix.
pub fn demeaned_curves(ds: &LongitudinalFunctionalDataset, mean: &MeanEstimate) -> Result<DMatrix<f64>> {
    let names: Vec<String> = mean.covariates.iter().map(|c| c.name.clone()).collect();
    let z = covariate_matrix(ds, &names)?;
    let mut y = curve_matrix(ds);
    for (row, (_, t, _)) in ds.curves().enumerate() {
        let zr: Vec<f64> = z.row(row).iter().copied().collect();
        let f = mean.fitted(t, &zr);
        for (j, v) in f.iter().enumerate() {
            y[(row, j)] -= v;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalCovariance {
    pub grid_s: Vec<f64>,
    /// `R × R` raw covariance; its diagonal carries the white-noise variance
    /// and is excluded from smoothing.
    pub raw: DMatrix<f64>,
    pub smoothed: Option<DMatrix<f64>>,
    /// Per-subject weights `v_i`.
    pub weights_used: Vec<f64>,
    pub bandwidth: Option<f64>,
}

impl MarginalCovariance {
    /// Raw diagonal entries are not used by the smoother.
    pub fn diagonal_excluded(&self) -> bool {
        true
    }
}

/// `Σ_i v_i Σ_j Ỹ_ij Ỹ_ijᵀ` from already demeaned curves.
pub fn raw_covariance_from_residuals(
    grid_s: &[f64],
    resid: &DMatrix<f64>,
    visits: &[usize],
    scheme: WeightScheme,
) -> Result<MarginalCovariance> {
    if resid.nrows() != visits.iter().sum::<usize>() || resid.ncols() != grid_s.len() {
        return Err(ProfitError::Dimension(
            "residual matrix does not match the visit layout".into(),
        ));
    }
    let v = scheme.weights(visits);
    let mut scaled = resid.clone();
    let mut row = 0;
    for (i, &m) in visits.iter().enumerate() {
        let f = v[i].sqrt();
        for _ in 0..m {
            scaled.row_mut(row).scale_mut(f);
            row += 1;
        }
    }
    let raw = scaled.transpose() * scaled;
    Ok(MarginalCovariance {
        grid_s: grid_s.to_vec(),
        raw,
        smoothed: None,
        weights_used: v,
        bandwidth: None,
    })
}

pub fn raw_marginal_covariance(
    ds: &LongitudinalFunctionalDataset,
    mean: &MeanEstimate,
    scheme: WeightScheme,
) -> Result<MarginalCovariance> {
    let resid = demeaned_curves(ds, mean)?;
    let visits: Vec<usize> = ds.subjects.iter().map(|s| s.n_visits()).collect();
    raw_covariance_from_residuals(&ds.grid_s, &resid, &visits, scheme)
}

/// Local-linear smoothing of the off-diagonal raw covariance, symmetrized.
pub fn smooth_marginal_covariance(
    mc: &MarginalCovariance,
    cfg: &KernelConfig,
) -> Result<MarginalCovariance> {
    let r = mc.grid_s.len();
    let mask = DMatrix::from_fn(r, r, |i, j| if i == j { 0.0 } else { 1.0 });
    let sm = local_linear_2d_grid(&mc.grid_s, &mc.raw, &mask, cfg)?;
    let sym = (&sm.values + sm.values.transpose()) * 0.5;
    Ok(MarginalCovariance {
        smoothed: Some(sym),
        bandwidth: Some(sm.bandwidth),
        ..mc.clone()
    })
}

/// Retained eigenpairs of the smoothed marginal covariance operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalBasis {
    pub grid_s: Vec<f64>,
    /// Operator eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// `K × R`; row `k` is `φ̂_k` on the grid, `(1/R) Σ φ̂_k² = 1`.
    pub eigenfunctions: DMatrix<f64>,
    pub delta_s: f64,
    pub pve_threshold: f64,
    pub pve_achieved: f64,
    /// Sum of the positive eigenvalues.
    pub total_trace: f64,
}

impl MarginalBasis {
    /// Basis from known functions tabulated on `grid_s` (rows), normalized
    /// to unit discrete norm and sign-fixed.
    pub fn from_functions(grid_s: &[f64], eigenvalues: Vec<f64>, functions: DMatrix<f64>) -> Result<Self> {
        let r = grid_s.len();
        if functions.ncols() != r || functions.nrows() != eigenvalues.len() {
            return Err(ProfitError::Dimension("basis functions do not match the grid".into()));
        }
        let mut f = functions;
        for k in 0..f.nrows() {
            let norm = (f.row(k).norm_squared() / r as f64).sqrt();
            if !(norm > 0.0) {
                return Err(ProfitError::Degenerate(format!("basis function {k} is zero")));
            }
            f.row_mut(k).scale_mut(1.0 / norm);
            let row: Vec<f64> = f.row(k).iter().copied().collect();
            if sign_flip_needed(&row) {
                f.row_mut(k).neg_mut();
            }
        }
        let total: f64 = eigenvalues.iter().filter(|&&v| v > 0.0).sum();
        Ok(MarginalBasis {
            grid_s: grid_s.to_vec(),
            eigenfunctions: f,
            delta_s: 1.0 / r as f64,
            pve_threshold: 1.0,
            pve_achieved: 1.0,
            total_trace: total,
            eigenvalues,
        })
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn function(&self, k: usize) -> Vec<f64> {
        self.eigenfunctions.row(k).iter().copied().collect()
    }

    /// Keep at most `k` directions.
    pub fn truncate(&mut self, k: usize) {
        if k < self.k() {
            self.eigenvalues.truncate(k);
            self.eigenfunctions = self.eigenfunctions.rows(0, k).into_owned();
            self.pve_achieved = if self.total_trace > 0.0 {
                self.eigenvalues.iter().sum::<f64>() / self.total_trace
            } else {
                0.0
            };
        }
    }

    /// Short content hash identifying the basis.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.eigenfunctions.iter().chain(&self.eigenvalues) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            grid_s: &'a [f64],
            eigenvalues: &'a [f64],
            eigenfunctions: Vec<Vec<f64>>,
            pve_threshold: f64,
            pve_achieved: f64,
            total_trace: f64,
        }
        let e = Export {
            grid_s: &self.grid_s,
            eigenvalues: &self.eigenvalues,
            eigenfunctions: (0..self.k()).map(|k| self.function(k)).collect(),
            pve_threshold: self.pve_threshold,
            pve_achieved: self.pve_achieved,
            total_trace: self.total_trace,
        };
        Ok(serde_json::to_string_pretty(&e)?)
    }

    /// CSV with columns `s, phi_1, …, phi_K`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["s".to_string()];
        header.extend((1..=self.k()).map(|k| format!("phi_{k}")));
        w.write_record(&header).map_err(|e| ProfitError::Csv(e.to_string()))?;
        for (j, s) in self.grid_s.iter().enumerate() {
            let mut rec = vec![s.to_string()];
            rec.extend((0..self.k()).map(|k| self.eigenfunctions[(k, j)].to_string()));
            w.write_record(&rec).map_err(|e| ProfitError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| ProfitError::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Nonnegative discrete integral; near-zero integrals fall back to a
/// positive first nonzero coordinate.
fn sign_flip_needed(phi: &[f64]) -> bool {
    let integral = phi.iter().sum::<f64>() / phi.len() as f64;
    if integral.abs() > 1e-8 {
        return integral < 0.0;
    }
    phi.iter()
        .find(|v| v.abs() > 1e-12)
        .is_some_and(|&v| v < 0.0)
}

/// Eigenpairs of the smoothed covariance with `K` chosen as the smallest
/// count whose eigenvalues explain at least `pve` of the positive trace.
pub fn eigen_basis(mc: &MarginalCovariance, pve: f64) -> Result<MarginalBasis> {
    if !(pve > 0.0 && pve <= 1.0) {
        return Err(ProfitError::Config(format!("pve must lie in (0, 1], got {pve}")));
    }
    let sm = mc
        .smoothed
        .as_ref()
        .ok_or_else(|| ProfitError::Config("marginal covariance has not been smoothed".into()))?;
    let r = mc.grid_s.len();
    let (vals, vecs) = sym_eigen_desc(sm);
    let ops: Vec<f64> = vals.iter().map(|v| (v / r as f64).max(0.0)).collect();
    let total: f64 = ops.iter().sum();
    if !(ops[0] > 0.0) {
        return Err(ProfitError::Degenerate(
            "covariance estimate negative-definite; increase smoothing".into(),
        ));
    }
    let mut cum = 0.0;
    let mut k = 0;
    for &l in &ops {
        if l <= 0.0 {
            break;
        }
        cum += l;
        k += 1;
        if cum / total >= pve - 1e-12 {
            break;
        }
    }
    let mut f = DMatrix::zeros(k, r);
    let scale = (r as f64).sqrt();
    for kk in 0..k {
        let mut phi: Vec<f64> = vecs.column(kk).iter().map(|v| v * scale).collect();
        if sign_flip_needed(&phi) {
            phi.iter_mut().for_each(|v| *v = -*v);
        }
        for j in 0..r {
            f[(kk, j)] = phi[j];
        }
    }
    Ok(MarginalBasis {
        grid_s: mc.grid_s.clone(),
        eigenvalues: ops[..k].to_vec(),
        eigenfunctions: f,
        delta_s: 1.0 / r as f64,
        pve_threshold: pve,
        pve_achieved: cum / total,
        total_trace: total,
    })
}

/// One subject's projected series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSubject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Covariate values in the order of [`ProjectedSeries::covariate_names`].
    pub covariates: Vec<f64>,
}

/// Quasi-projections `W_{k,ij} = R⁻¹ Σ_r Y_ij(s_r) φ̂_k(s_r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSeries {
    pub k: usize,
    pub covariate_names: Vec<String>,
    pub subjects: Vec<ProjectedSubject>,
    pub basis_hash: String,
}

impl ProjectedSeries {
    pub fn n_total(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect()
    }

    pub fn pooled_values(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    /// Series with the given values per subject, keeping times and
    /// covariates.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Self {
        let mut out = self.clone();
        for (s, v) in out.subjects.iter_mut().zip(values) {
            s.values = v;
        }
        out
    }
}

/// Project the raw curves onto direction `k` of `basis`, carrying the
/// covariates named in `covariates`.
pub fn quasi_project(
    ds: &LongitudinalFunctionalDataset,
    basis: &MarginalBasis,
    k: usize,
    covariates: &[String],
) -> Result<ProjectedSeries> {
    if k >= basis.k() {
        return Err(ProfitError::Config(format!(
            "direction {k} requested but the basis has {} directions",
            basis.k()
        )));
    }
    let r = ds.grid_len();
    if basis.grid_s.len() != r
        || basis
            .grid_s
            .iter()
            .zip(&ds.grid_s)
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(ProfitError::Dimension(
            "basis grid does not match the dataset grid".into(),
        ));
    }
    let phi = DVector::from_iterator(r, basis.eigenfunctions.row(k).iter().copied());
    let subjects = ds
        .subjects
        .iter()
        .map(|s| {
            let values = s
                .curves
                .iter()
                .map(|c| c.iter().zip(phi.iter()).map(|(y, p)| y * p).sum::<f64>() / r as f64)
                .collect();
            let cov = covariates
                .iter()
                .map(|n| {
                    s.covariates.get(n).copied().ok_or_else(|| {
                        ProfitError::Validation(format!("subject {} has no covariate {n:?}", s.id))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(ProjectedSubject {
                id: s.id.clone(),
                times: s.times.clone(),
                values,
                covariates: cov,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectedSeries {
        k,
        covariate_names: covariates.to_vec(),
        subjects,
        basis_hash: basis.hash(),
    })
}
