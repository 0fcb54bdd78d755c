//! Penalized B-spline smoothing (P-splines) with difference penalties.
//!
//! Penalty weights are relative: each difference penalty is rescaled so its
//! trace equals the trace of the Gram matrix it is added to. A weight of 1
//! then balances fit and roughness regardless of the number of points.
//!
//! Tuning by GCV uses the Demmler-Reinsch form. With `LLᵀ = G + P` and
//! `L⁻¹GL⁻ᵀ = U diag(d) Uᵀ`, both `G` and `P` are diagonal in the basis
//! `T = L⁻ᵀU` (`d` and `1 − d`), so every candidate weight costs O(c).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::bspline::{difference_penalty, BSplineBasis};
use super::gcv::{gcv_select, GcvPoint, GcvSelection};
use crate::data::BivariateSurface;
use crate::error::{ProfitError, Result};
use crate::linalg::{logspace, sym_eigen_desc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotSpec {
    /// Number of basis functions on equally spaced knots.
    Count(usize),
    /// Breakpoints including both domain ends (clamped basis).
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySpec {
    Fixed(f64),
    Gcv(Vec<f64>),
    /// GCV over 13 log-spaced weights in `[1e-4, 1e4]`.
    GcvDefault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub degree: usize,
    pub knots: KnotSpec,
    pub penalty_order: usize,
    pub penalty: PenaltySpec,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            degree: 3,
            knots: KnotSpec::Count(10),
            penalty_order: 2,
            penalty: PenaltySpec::GcvDefault,
        }
    }
}

pub fn default_penalty_grid() -> Vec<f64> {
    logspace(1e-4, 1e4, 13)
}

impl SplineConfig {
    pub fn with_basis_count(n: usize) -> Self {
        SplineConfig {
            knots: KnotSpec::Count(n),
            ..Default::default()
        }
    }

    pub fn with_penalty(mut self, penalty: PenaltySpec) -> Self {
        self.penalty = penalty;
        self
    }

    pub fn basis(&self, lo: f64, hi: f64) -> Result<BSplineBasis> {
        match &self.knots {
            KnotSpec::Count(n) => BSplineBasis::uniform(lo, hi, *n, self.degree),
            KnotSpec::Explicit(b) => {
                if b.first().is_some_and(|&a| a > lo) || b.last().is_some_and(|&z| z < hi) {
                    return Err(ProfitError::Config(
                        "explicit knots must cover the data domain".into(),
                    ));
                }
                BSplineBasis::from_breakpoints(b, self.degree)
            }
        }
    }

    /// Candidate penalty weights, ascending.
    pub fn lambdas(&self) -> Result<Vec<f64>> {
        let mut l = match &self.penalty {
            PenaltySpec::Fixed(l) => vec![*l],
            PenaltySpec::Gcv(g) => g.clone(),
            PenaltySpec::GcvDefault => default_penalty_grid(),
        };
        l.sort_by(f64::total_cmp);
        if l.is_empty() || l.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(ProfitError::Config(
                "penalty weights must be a non-empty set of finite values >= 0".into(),
            ));
        }
        Ok(l)
    }

    fn penalty_matrix(&self, n_basis: usize) -> DMatrix<f64> {
        difference_penalty(n_basis, self.penalty_order)
    }
}

/// Scale `p` so that `tr(p) = tr(g)`.
fn normalize_penalty(p: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let tp = p.trace();
    if tp > 0.0 {
        p * (g.trace() / tp)
    } else {
        p.clone()
    }
}

/// Simultaneous diagonalization of a Gram matrix and a penalty.
#[derive(Debug, Clone)]
struct DemmlerReinsch {
    /// `θ = T φ`.
    transform: DMatrix<f64>,
    /// Eigenvalues of `L⁻¹GL⁻ᵀ`, in `[0, 1]`.
    d: Vec<f64>,
}

impl DemmlerReinsch {
    fn new(g: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<Self> {
        let a = g + p;
        let chol = a.cholesky().ok_or_else(|| {
            ProfitError::Rank(
                "penalized system is singular: the data cannot identify the \
                 unpenalized part of the fit (too few distinct points)"
                    .into(),
            )
        })?;
        let l = chol.l();
        let x = l
            .solve_lower_triangular(g)
            .ok_or_else(|| ProfitError::Rank("triangular solve failed".into()))?;
        let m = l
            .solve_lower_triangular(&x.transpose())
            .ok_or_else(|| ProfitError::Rank("triangular solve failed".into()))?;
        let (d, u) = sym_eigen_desc(&m);
        let transform = l
            .tr_solve_lower_triangular(&u)
            .ok_or_else(|| ProfitError::Rank("triangular solve failed".into()))?;
        Ok(DemmlerReinsch {
            transform,
            d: d.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// Diagonal of `G + λP` in the transformed basis.
    fn denominators(&self, lambda: f64) -> Result<Vec<f64>> {
        let e: Vec<f64> = self.d.iter().map(|&d| d + lambda * (1.0 - d)).collect();
        if e.iter().any(|&v| v <= 1e-12) {
            return Err(ProfitError::Rank(
                "unpenalized fit is rank deficient; use a positive penalty weight".into(),
            ));
        }
        Ok(e)
    }
}

/// Univariate penalized spline fit.
#[derive(Debug, Clone)]
pub struct PSplineFit1d {
    pub basis: BSplineBasis,
    /// Spline coefficients.
    pub coef: DVector<f64>,
    /// Coefficients of the unpenalized extra columns, if any.
    pub extra_coef: Vec<f64>,
    pub lambda: f64,
    /// Effective degrees of freedom `tr(H)`.
    pub edf: f64,
    pub rss: f64,
    pub gcv: Option<GcvSelection>,
}

impl PSplineFit1d {
    /// Spline part of the fit at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let lb = self.basis.eval_local(x);
        (0..=self.basis.degree())
            .map(|j| lb.values[j] * self.coef[lb.first + j])
            .sum()
    }
}

/// Fit `y ~ spline(x)` by weighted penalized least squares on the data range.
pub fn pspline_1d(x: &[f64], y: &[f64], w: &[f64], cfg: &SplineConfig) -> Result<PSplineFit1d> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    pspline_1d_with(x, y, w, cfg, (lo, hi), None)
}

/// Penalized spline fit on `domain`, optionally with extra unpenalized
/// linear terms (`extra` has one row per point).
pub fn pspline_1d_with(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    cfg: &SplineConfig,
    domain: (f64, f64),
    extra: Option<&DMatrix<f64>>,
) -> Result<PSplineFit1d> {
    let n = x.len();
    if y.len() != n || w.len() != n {
        return Err(ProfitError::Dimension(
            "x, y and weights must have equal length".into(),
        ));
    }
    if n == 0 {
        return Err(ProfitError::Smoother("no points to smooth".into()));
    }
    if x.iter().chain(y).chain(w).any(|v| !v.is_finite()) || w.iter().any(|&v| v < 0.0) {
        return Err(ProfitError::Validation(
            "smoother inputs must be finite with nonnegative weights".into(),
        ));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(ProfitError::Rank(
            "all x values identical; cannot fit a spline".into(),
        ));
    }
    let basis = cfg.basis(domain.0, domain.1)?;
    let c = basis.n_basis();
    let q = extra.map_or(0, |e| e.ncols());
    if let Some(e) = extra {
        if e.nrows() != n {
            return Err(ProfitError::Dimension("extra design rows != points".into()));
        }
    }
    let dim = c + q;
    let deg = basis.degree();

    let mut g = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let mut yy = 0.0;
    for i in 0..n {
        let lb = basis.eval_local(x[i]);
        let wi = w[i];
        yy += wi * y[i] * y[i];
        for a in 0..=deg {
            let va = lb.values[a] * wi;
            let ia = lb.first + a;
            b[ia] += va * y[i];
            for bb in 0..=deg {
                g[(ia, lb.first + bb)] += va * lb.values[bb];
            }
        }
        if let Some(e) = extra {
            for k in 0..q {
                let ek = e[(i, k)] * wi;
                b[c + k] += ek * y[i];
                for a in 0..=deg {
                    let v = ek * lb.values[a];
                    g[(c + k, lb.first + a)] += v;
                    g[(lb.first + a, c + k)] += v;
                }
                for k2 in 0..q {
                    g[(c + k, c + k2)] += ek * e[(i, k2)];
                }
            }
        }
    }

    fit_gram(basis, c, &SplineGram { g, b, yy, n: n as f64 }, cfg)
}

/// Weighted normal equations `BᵀWB`, `BᵀWy`, `yᵀWy` of a spline fit;
/// additive over disjoint sets of points.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGram {
    pub g: DMatrix<f64>,
    pub b: DVector<f64>,
    pub yy: f64,
    /// Number of points (for GCV).
    pub n: f64,
}

impl SplineGram {
    pub fn zeros(dim: usize) -> Self {
        SplineGram {
            g: DMatrix::zeros(dim, dim),
            b: DVector::zeros(dim),
            yy: 0.0,
            n: 0.0,
        }
    }

    /// Normal equations of the points `(x, y)` with unit weights.
    pub fn from_points(basis: &BSplineBasis, x: &[f64], y: &[f64]) -> Self {
        let deg = basis.degree();
        let mut out = SplineGram::zeros(basis.n_basis());
        for (&xi, &yi) in x.iter().zip(y) {
            let lb = basis.eval_local(xi);
            out.yy += yi * yi;
            for a in 0..=deg {
                let ia = lb.first + a;
                out.b[ia] += lb.values[a] * yi;
                for bb in 0..=deg {
                    out.g[(ia, lb.first + bb)] += lb.values[a] * lb.values[bb];
                }
            }
        }
        out.n = x.len() as f64;
        out
    }

    pub fn add_assign(&mut self, other: &SplineGram) {
        self.g += &other.g;
        self.b += &other.b;
        self.yy += other.yy;
        self.n += other.n;
    }
}

/// Penalized fit from accumulated normal equations (no extra columns).
pub fn pspline_1d_from_gram(basis: &BSplineBasis, gram: &SplineGram, cfg: &SplineConfig) -> Result<PSplineFit1d> {
    let c = basis.n_basis();
    if gram.g.nrows() != c || gram.b.len() != c {
        return Err(ProfitError::Dimension("normal equations do not match the basis".into()));
    }
    fit_gram(basis.clone(), c, gram, cfg)
}

fn fit_gram(basis: BSplineBasis, c: usize, gram: &SplineGram, cfg: &SplineConfig) -> Result<PSplineFit1d> {
    let dim = gram.g.nrows();
    let (g, b, yy, n) = (&gram.g, &gram.b, gram.yy, gram.n);
    let mut p = DMatrix::<f64>::zeros(dim, dim);
    let ps = normalize_penalty(&cfg.penalty_matrix(c), &g.view((0, 0), (c, c)).into_owned());
    p.view_mut((0, 0), (c, c)).copy_from(&ps);

    let dr = DemmlerReinsch::new(&g, &p)?;
    let ct = dr.transform.transpose() * b;
    let eval = |lambda: f64| -> Result<(GcvPoint, Vec<f64>)> {
        let e = dr.denominators(lambda)?;
        let mut cross = 0.0;
        let mut fit2 = 0.0;
        let mut tr = 0.0;
        for a in 0..dim {
            let c2 = ct[a] * ct[a];
            cross += c2 / e[a];
            fit2 += dr.d[a] * c2 / (e[a] * e[a]);
            tr += dr.d[a] / e[a];
        }
        let rss = (yy - 2.0 * cross + fit2).max(0.0);
        Ok((
            GcvPoint {
                rss,
                trace: tr,
                n: n as f64,
            },
            e,
        ))
    };

    let lambdas = cfg.lambdas()?;
    let (lambda, gcv) = if lambdas.len() == 1 {
        (lambdas[0], None)
    } else {
        let sel = gcv_select(&lambdas, |l| eval(l).ok().map(|r| r.0))?;
        (sel.chosen, Some(sel))
    };
    let (point, e) = eval(lambda)?;
    let phi = DVector::from_iterator(dim, (0..dim).map(|a| ct[a] / e[a]));
    let theta = &dr.transform * phi;
    Ok(PSplineFit1d {
        coef: theta.rows(0, c).into_owned(),
        extra_coef: theta.iter().skip(c).copied().collect(),
        basis,
        lambda,
        edf: point.trace,
        rss: point.rss,
        gcv,
    })
}

use super::local_linear::WeightedPoint2;

/// Options for [`pspline_2d`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2dOptions {
    /// Domain of each axis; defaults to the data range.
    pub domain1: Option<(f64, f64)>,
    pub domain2: Option<(f64, f64)>,
    /// Use one penalty weight for both axes (the axis-1 candidates).
    pub tied: bool,
    /// Fold label per point. With at least two folds the tied weight is
    /// chosen by cross-validation over folds instead of GCV.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
}

impl Default for Tensor2dOptions {
    fn default() -> Self {
        Tensor2dOptions {
            domain1: None,
            domain2: None,
            tied: false,
            folds: None,
        }
    }
}

/// Tensor-product penalized spline fit. Coefficient `(j1, j2)` is stored at
/// `j1 * c2 + j2`.
#[derive(Debug, Clone)]
pub struct TensorPSplineFit {
    pub basis1: BSplineBasis,
    pub basis2: BSplineBasis,
    pub coef: DVector<f64>,
    pub lambdas: (f64, f64),
    pub edf: f64,
    pub rss: f64,
    /// Scores over the candidate grid as `((λ₁, λ₂), score)`.
    pub gcv_trace: Vec<((f64, f64), Option<f64>)>,
}

impl TensorPSplineFit {
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let c2 = self.basis2.n_basis();
        let l1 = self.basis1.eval_local(x1);
        let l2 = self.basis2.eval_local(x2);
        let mut s = 0.0;
        for a in 0..=self.basis1.degree() {
            for b in 0..=self.basis2.degree() {
                s += l1.values[a] * l2.values[b] * self.coef[(l1.first + a) * c2 + l2.first + b];
            }
        }
        s
    }

    /// Values on `grid1 × grid2`, row-major in `grid1`.
    pub fn on_grid(&self, grid1: &[f64], grid2: &[f64]) -> DMatrix<f64> {
        let c1 = self.basis1.n_basis();
        let c2 = self.basis2.n_basis();
        let b1 = self.basis1.design(grid1);
        let b2 = self.basis2.design(grid2);
        let theta = DMatrix::from_row_slice(c1, c2, self.coef.as_slice());
        b1 * theta * b2.transpose()
    }

    pub fn surface(&self, grid1: &[f64], grid2: &[f64]) -> Result<BivariateSurface> {
        let m = self.on_grid(grid1, grid2);
        let values = (0..grid1.len())
            .flat_map(|i| (0..grid2.len()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        BivariateSurface::new(grid1.to_vec(), grid2.to_vec(), values)
    }
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Tensor-product penalized spline on scattered weighted points, minimizing
/// `Σ w (v − f)² + λ₁·(axis-1 difference penalty) + λ₂·(axis-2 difference
/// penalty)`.
pub fn pspline_2d(
    points: &[WeightedPoint2],
    cfg1: &SplineConfig,
    cfg2: &SplineConfig,
    opts: &Tensor2dOptions,
) -> Result<TensorPSplineFit> {
    if points.is_empty() {
        return Err(ProfitError::Smoother("no points to smooth".into()));
    }
    if points
        .iter()
        .any(|p| !(p.x1.is_finite() && p.x2.is_finite() && p.value.is_finite() && p.weight.is_finite()) || p.weight < 0.0)
    {
        return Err(ProfitError::Validation(
            "non-finite coordinate/value or negative weight".into(),
        ));
    }
    let range = |f: fn(&WeightedPoint2) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        })
    };
    let r1 = range(|p| p.x1);
    let r2 = range(|p| p.x2);
    if r1.0 == r1.1 || r2.0 == r2.1 {
        return Err(ProfitError::Rank(
            "all points share one coordinate value; the surface is not identifiable".into(),
        ));
    }
    let d1 = opts.domain1.unwrap_or(r1);
    let d2 = opts.domain2.unwrap_or(r2);
    let basis1 = cfg1.basis(d1.0, d1.1)?;
    let basis2 = cfg2.basis(d2.0, d2.1)?;
    let (c1, c2) = (basis1.n_basis(), basis2.n_basis());
    let dim = c1 * c2;
    let (p1d, p2d) = (basis1.degree(), basis2.degree());

    let folds = match &opts.folds {
        Some(f) if f.len() != points.len() => {
            return Err(ProfitError::Dimension(format!(
                "{} fold labels for {} points",
                f.len(),
                points.len()
            )))
        }
        Some(f) if opts.tied => {
            let k = f.iter().max().map_or(0, |m| m + 1);
            (k >= 2).then(|| (f.as_slice(), k))
        }
        _ => None,
    };
    let n_folds = folds.map_or(1, |f| f.1);
    let mut fold_g = vec![DMatrix::<f64>::zeros(dim, dim); n_folds];
    let mut fold_b = vec![DVector::<f64>::zeros(dim); n_folds];
    let mut fold_yy = vec![0.0; n_folds];
    let mut idx = Vec::with_capacity((p1d + 1) * (p2d + 1));
    let mut val = Vec::with_capacity((p1d + 1) * (p2d + 1));
    for (pi, p) in points.iter().enumerate() {
        let f = folds.map_or(0, |f| f.0[pi]);
        let (g, b, yy) = (&mut fold_g[f], &mut fold_b[f], &mut fold_yy[f]);
        let l1 = basis1.eval_local(p.x1);
        let l2 = basis2.eval_local(p.x2);
        idx.clear();
        val.clear();
        for a in 0..=p1d {
            for bb in 0..=p2d {
                idx.push((l1.first + a) * c2 + l2.first + bb);
                val.push(l1.values[a] * l2.values[bb]);
            }
        }
        *yy += p.weight * p.value * p.value;
        for (ia, &va) in idx.iter().zip(&val) {
            let wa = va * p.weight;
            b[*ia] += wa * p.value;
            for (ib, &vb) in idx.iter().zip(&val) {
                g[(*ia, *ib)] += wa * vb;
            }
        }
    }
    let g = fold_g.iter().fold(DMatrix::zeros(dim, dim), |a, x| a + x);
    let b = fold_b.iter().fold(DVector::zeros(dim), |a, x| a + x);
    let yy: f64 = fold_yy.iter().sum();

    let pen1 = normalize_penalty(&kron(&cfg1.penalty_matrix(c1), &DMatrix::identity(c2, c2)), &g);
    let pen2 = normalize_penalty(&kron(&DMatrix::identity(c1, c1), &cfg2.penalty_matrix(c2)), &g);
    let n = points.len() as f64;
    let l1s = cfg1.lambdas()?;
    let l2s = cfg2.lambdas()?;

    if opts.tied {
        let pen = &pen1 + &pen2;
        let dr = DemmlerReinsch::new(&g, &pen)?;
        let ct = dr.transform.transpose() * &b;
        let eval = |lambda: f64| -> Result<(GcvPoint, Vec<f64>)> {
            let e = dr.denominators(lambda)?;
            let (mut cross, mut fit2, mut tr) = (0.0, 0.0, 0.0);
            for a in 0..dim {
                let c2v = ct[a] * ct[a];
                cross += c2v / e[a];
                fit2 += dr.d[a] * c2v / (e[a] * e[a]);
                tr += dr.d[a] / e[a];
            }
            Ok((
                GcvPoint {
                    rss: (yy - 2.0 * cross + fit2).max(0.0),
                    trace: tr,
                    n,
                },
                e,
            ))
        };
        let (lambda, trace) = if l1s.len() == 1 {
            (l1s[0], vec![((l1s[0], l1s[0]), eval(l1s[0])?.0.score())])
        } else if folds.is_some() {
            fold_cv_select(&l1s, &pen, &g, &b, &fold_g, &fold_b, &fold_yy)?
        } else {
            let sel = gcv_select(&l1s, |l| eval(l).ok().map(|r| r.0))?;
            let tr = sel.trace.iter().map(|&(l, s)| ((l, l), s)).collect();
            (sel.chosen, tr)
        };
        let (point, e) = eval(lambda)?;
        let phi = DVector::from_iterator(dim, (0..dim).map(|a| ct[a] / e[a]));
        return Ok(TensorPSplineFit {
            coef: &dr.transform * phi,
            basis1,
            basis2,
            lambdas: (lambda, lambda),
            edf: point.trace,
            rss: point.rss,
            gcv_trace: trace,
        });
    }

    // Independent weights: direct solve per candidate pair.
    let solve = |l1: f64, l2: f64| -> Result<(GcvPoint, DVector<f64>)> {
        let a = &g + &pen1 * l1 + &pen2 * l2;
        let chol = a.cholesky().ok_or_else(|| {
            ProfitError::Rank(if l1 == 0.0 && l2 == 0.0 {
                "unpenalized tensor fit is rank deficient; use a positive penalty weight".into()
            } else {
                "penalized tensor system is singular".into()
            })
        })?;
        let theta = chol.solve(&b);
        let h = chol.solve(&g);
        let tr = h.trace();
        let rss = (yy - 2.0 * theta.dot(&b) + (theta.transpose() * &g * &theta)[(0, 0)]).max(0.0);
        Ok((GcvPoint { rss, trace: tr, n }, theta))
    };
    let mut trace = Vec::with_capacity(l1s.len() * l2s.len());
    let mut best: Option<((f64, f64), f64)> = None;
    // Ascending order in both weights; ties go to the later (smoother) pair.
    for &l1 in &l1s {
        for &l2 in &l2s {
            let s = solve(l1, l2).ok().and_then(|r| r.0.score());
            trace.push(((l1, l2), s));
            if let Some(s) = s {
                match best {
                    Some((_, bs)) if s > bs * (1.0 + 1e-12) => {}
                    _ => best = Some(((l1, l2), s)),
                }
            }
        }
    }
    let (l1, l2) = match best {
        Some((l, _)) => l,
        None if trace.len() == 1 => {
            // Single candidate: surface the underlying error.
            solve(l1s[0], l2s[0])?;
            return Err(ProfitError::Smoother("grid entirely undersmoothed".into()));
        }
        None => return Err(ProfitError::Smoother("grid entirely undersmoothed".into())),
    };
    let (point, theta) = solve(l1, l2)?;
    Ok(TensorPSplineFit {
        basis1,
        basis2,
        coef: theta,
        lambdas: (l1, l2),
        edf: point.trace,
        rss: point.rss,
        gcv_trace: trace,
    })
}

/// Tied penalty weight minimizing the held-out squared error summed over
/// folds; ties go to the smoother candidate.
#[allow(clippy::type_complexity)]
fn fold_cv_select(
    lambdas: &[f64],
    pen: &DMatrix<f64>,
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    fold_g: &[DMatrix<f64>],
    fold_b: &[DVector<f64>],
    fold_yy: &[f64],
) -> Result<(f64, Vec<((f64, f64), Option<f64>)>)> {
    let mut trace = Vec::with_capacity(lambdas.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in lambdas {
        let mut err = Some(0.0);
        for f in 0..fold_g.len() {
            let a = g - &fold_g[f] + pen * lambda;
            let Some(chol) = a.cholesky() else {
                err = None;
                break;
            };
            let theta = chol.solve(&(b - &fold_b[f]));
            let e = fold_yy[f] - 2.0 * theta.dot(&fold_b[f]) + (theta.transpose() * &fold_g[f] * &theta)[(0, 0)];
            err = err.map(|s| s + e.max(0.0));
        }
        trace.push(((lambda, lambda), err));
        if let Some(e) = err {
            match best {
                Some((_, be)) if e > be * (1.0 + 1e-12) => {}
                _ => best = Some((lambda, e)),
            }
        }
    }
    match best {
        Some((lambda, _)) => Ok((lambda, trace)),
        None => Err(ProfitError::Smoother("no feasible penalty weight in cross-validation".into())),
    }
}

/// Penalized tensor-product fit for curves sharing one grid (`Y` is
/// `N × R`, row `i` observed at `t_i` on the common `s` grid), using the
/// sandwich form `Θ = (G_t + λ_t P_t)⁻¹ B_tᵀ Y B_s (G_s + λ_s P_s)⁻¹`.
#[derive(Debug, Clone)]
pub struct SandwichFit {
    pub basis_t: BSplineBasis,
    pub basis_s: BSplineBasis,
    /// `c_t × c_s` coefficients.
    pub theta: DMatrix<f64>,
    pub lambda_t: f64,
    pub lambda_s: f64,
    pub edf: f64,
    pub rss: f64,
    /// Basis of the `s` grid the fit was computed on (`R × c_s`).
    design_s: DMatrix<f64>,
}

struct AxisDecomp {
    dr: DemmlerReinsch,
    lambdas: Vec<f64>,
}

impl AxisDecomp {
    fn new(gram: &DMatrix<f64>, cfg: &SplineConfig) -> Result<Self> {
        let pen = normalize_penalty(&cfg.penalty_matrix(gram.nrows()), gram);
        Ok(AxisDecomp {
            dr: DemmlerReinsch::new(gram, &pen)?,
            lambdas: cfg.lambdas()?,
        })
    }
}

impl SandwichFit {
    pub fn fit(
        y: &DMatrix<f64>,
        t: &[f64],
        grid_s: &[f64],
        cfg_t: &SplineConfig,
        cfg_s: &SplineConfig,
        domain_t: (f64, f64),
    ) -> Result<Self> {
        let (n, r) = (y.nrows(), y.ncols());
        if t.len() != n || grid_s.len() != r {
            return Err(ProfitError::Dimension(
                "sandwich smoother: data shape does not match coordinates".into(),
            ));
        }
        let basis_t = cfg_t.basis(domain_t.0, domain_t.1)?;
        let basis_s = cfg_s.basis(grid_s[0], grid_s[r - 1])?;
        let bt = basis_t.design(t);
        let bs = basis_s.design(grid_s);
        let gt = bt.transpose() * &bt;
        let gs = bs.transpose() * &bs;
        let c = bt.transpose() * (y * &bs);
        let yy = y.norm_squared();

        let at = AxisDecomp::new(&gt, cfg_t)?;
        let as_ = AxisDecomp::new(&gs, cfg_s)?;
        let ct = at.dr.transform.transpose() * c * &as_.dr.transform;
        let c2 = ct.map(|v| v * v);
        let ntot = (n * r) as f64;

        let score = |lt: f64, ls: f64| -> Option<(GcvPoint, Vec<f64>, Vec<f64>)> {
            let et = at.dr.denominators(lt).ok()?;
            let es = as_.dr.denominators(ls).ok()?;
            let (mut cross, mut fit2) = (0.0, 0.0);
            for a in 0..et.len() {
                for b in 0..es.len() {
                    let e = et[a] * es[b];
                    cross += c2[(a, b)] / e;
                    fit2 += at.dr.d[a] * as_.dr.d[b] * c2[(a, b)] / (e * e);
                }
            }
            let trt: f64 = at.dr.d.iter().zip(&et).map(|(d, e)| d / e).sum();
            let trs: f64 = as_.dr.d.iter().zip(&es).map(|(d, e)| d / e).sum();
            Some((
                GcvPoint {
                    rss: (yy - 2.0 * cross + fit2).max(0.0),
                    trace: trt * trs,
                    n: ntot,
                },
                et,
                es,
            ))
        };

        let mut best: Option<(f64, f64, f64)> = None;
        for &lt in &at.lambdas {
            for &ls in &as_.lambdas {
                if let Some(s) = score(lt, ls).and_then(|r| r.0.score()) {
                    match best {
                        Some((_, _, bs)) if s > bs * (1.0 + 1e-12) => {}
                        _ => best = Some((lt, ls, s)),
                    }
                }
            }
        }
        let (lt, ls) = match best {
            Some((lt, ls, _)) => (lt, ls),
            None => {
                // Surface a rank error for the unpenalized case when present.
                at.dr.denominators(at.lambdas[0])?;
                as_.dr.denominators(as_.lambdas[0])?;
                return Err(ProfitError::Smoother("grid entirely undersmoothed".into()));
            }
        };
        let (point, et, es) = score(lt, ls).expect("selected candidate is feasible");
        let phi = DMatrix::from_fn(et.len(), es.len(), |a, b| ct[(a, b)] / (et[a] * es[b]));
        let theta = &at.dr.transform * phi * as_.dr.transform.transpose();
        Ok(SandwichFit {
            basis_t,
            basis_s,
            theta,
            lambda_t: lt,
            lambda_s: ls,
            edf: point.trace,
            rss: point.rss,
            design_s: bs,
        })
    }

    /// Fitted curve on the fitting grid at time `t`.
    pub fn curve_at(&self, t: f64) -> Vec<f64> {
        let row = DVector::from_vec(self.basis_t.eval_row(t));
        let u = self.theta.transpose() * row;
        (&self.design_s * u).iter().copied().collect()
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let rt = self.basis_t.eval_row(t);
        let rs = self.basis_s.eval_row(s);
        let mut v = 0.0;
        for (a, &x) in rt.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (b, &y) in rs.iter().enumerate() {
                v += x * y * self.theta[(a, b)];
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reproduces_lines_for_any_penalty() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let w = vec![1.0; 40];
        for l in [1e-4, 1.0, 1e4] {
            let cfg = SplineConfig::default().with_penalty(PenaltySpec::Fixed(l));
            let f = pspline_1d(&x, &y, &w, &cfg).unwrap();
            for &xi in &[0.0, 0.33, 0.9, 1.0] {
                assert_abs_diff_eq!(f.eval(xi), 3.0 * xi - 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn extra_columns_are_unpenalized() {
        let x: Vec<f64> = (0..60).map(|i| (i % 20) as f64 / 19.0).collect();
        let z: Vec<f64> = (0..60).map(|i| (i / 20) as f64).collect();
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a * a + 2.5 * b).collect();
        let e = DMatrix::from_column_slice(60, 1, &z);
        let cfg = SplineConfig::default().with_penalty(PenaltySpec::Fixed(1e-6));
        let f = pspline_1d_with(&x, &y, &vec![1.0; 60], &cfg, (0.0, 1.0), Some(&e)).unwrap();
        assert_abs_diff_eq!(f.extra_coef[0], 2.5, epsilon = 1e-6);
    }

    #[test]
    fn zero_penalty_rank_deficient() {
        // Two distinct x values cannot determine a 10-function cubic basis.
        let x = vec![0.0, 1.0, 0.0, 1.0];
        let y = vec![1.0, 2.0, 1.5, 2.5];
        let cfg = SplineConfig::default().with_penalty(PenaltySpec::Fixed(0.0));
        let err = pspline_1d(&x, &y, &[1.0; 4], &cfg).unwrap_err();
        assert!(err.to_string().contains("positive penalty"), "{err}");
    }

    #[test]
    fn identical_x_rejected() {
        let err = pspline_1d(&[0.5; 5], &[1.0; 5], &[1.0; 5], &SplineConfig::default()).unwrap_err();
        assert!(matches!(err, ProfitError::Rank(_)));
    }

    fn grouped_points() -> (Vec<WeightedPoint2>, Vec<usize>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (mut pts, mut groups) = (Vec::new(), Vec::new());
        for g in 0..40 {
            // Each group carries its own rough offset shared by all its points.
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let xs: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            for &x1 in &xs {
                for &x2 in &xs {
                    let v = (x1 * x2).sin() + a * (9.0 * x1).sin() * b * (9.0 * x2).sin() + 0.1 * rng.random_range(-1.0..1.0);
                    pts.push(WeightedPoint2::new(x1, x2, v, 1.0));
                    groups.push(g % 5);
                }
            }
        }
        (pts, groups)
    }

    #[test]
    fn fold_labels_must_match_points() {
        let (pts, groups) = grouped_points();
        let opts = Tensor2dOptions {
            tied: true,
            folds: Some(groups[1..].to_vec()),
            ..Default::default()
        };
        let cfg = SplineConfig::default();
        assert!(matches!(pspline_2d(&pts, &cfg, &cfg, &opts), Err(ProfitError::Dimension(_))));
    }

    #[test]
    fn fold_cv_smooths_more_under_group_dependence() {
        let (pts, groups) = grouped_points();
        let cfg = SplineConfig::default();
        let gcv = pspline_2d(&pts, &cfg, &cfg, &Tensor2dOptions { tied: true, ..Default::default() }).unwrap();
        let cv = pspline_2d(
            &pts,
            &cfg,
            &cfg,
            &Tensor2dOptions {
                tied: true,
                folds: Some(groups),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(cv.lambdas.0 > gcv.lambdas.0, "cv {} gcv {}", cv.lambdas.0, gcv.lambdas.0);
        assert!(cv.gcv_trace.iter().all(|t| t.1.is_some()));
    }

    #[test]
    fn single_fold_falls_back_to_gcv() {
        let (pts, groups) = grouped_points();
        let cfg = SplineConfig::default();
        let plain = pspline_2d(&pts, &cfg, &cfg, &Tensor2dOptions { tied: true, ..Default::default() }).unwrap();
        let one = Tensor2dOptions {
            tied: true,
            folds: Some(vec![0; groups.len()]),
            ..Default::default()
        };
        assert_eq!(pspline_2d(&pts, &cfg, &cfg, &one).unwrap().lambdas, plain.lambdas);
    }
}
