//! Local-linear kernel regression in one and two dimensions.
//!
//! The bivariate intercept uses the closed form of the 3×3 weighted normal
//! equations in terms of the kernel moments
//! `V_pq = Σ w K K u^p v^q` and `R_pq = Σ w K K u^p v^q y`, with `u`, `v` the
//! bandwidth-scaled offsets from the evaluation point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gcv::{gcv_select, GcvPoint, GcvSelection};
use super::kernel::{Kernel, KernelConfig};
use crate::error::{ProfitError, Result};

/// A scattered weighted observation `(x1, x2, value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint2 {
    pub x1: f64,
    pub x2: f64,
    pub value: f64,
    pub weight: f64,
}

impl WeightedPoint2 {
    pub fn new(x1: f64, x2: f64, value: f64, weight: f64) -> Self {
        WeightedPoint2 {
            x1,
            x2,
            value,
            weight,
        }
    }
}

/// Output of a local-linear smoother.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLinearFit {
    pub values: Vec<f64>,
    pub bandwidth: f64,
    /// Evaluation indices where the local design was singular and the
    /// weighted mean was used instead.
    pub fallbacks: Vec<usize>,
    pub gcv: Option<GcvSelection>,
}

/// Relative determinant threshold below which a local design is singular.
const SINGULAR_TOL: f64 = 1e-10;

struct Moments1 {
    s0: f64,
    s1: f64,
    s2: f64,
    t0: f64,
    t1: f64,
}

fn moments_1d(x: &[f64], y: &[f64], w: &[f64], e: f64, kernel: Kernel, h: f64) -> Moments1 {
    let mut m = Moments1 {
        s0: 0.0,
        s1: 0.0,
        s2: 0.0,
        t0: 0.0,
        t1: 0.0,
    };
    for i in 0..x.len() {
        let u = (x[i] - e) / h;
        let k = kernel.eval(u) * w[i];
        if k == 0.0 {
            continue;
        }
        m.s0 += k;
        m.s1 += k * u;
        m.s2 += k * u * u;
        m.t0 += k * y[i];
        m.t1 += k * u * y[i];
    }
    m
}

/// Local intercept, or `None` if the local design is singular; `Err` for
/// an empty window.
fn intercept_1d(m: &Moments1) -> Option<f64> {
    let det = m.s0 * m.s2 - m.s1 * m.s1;
    if det <= SINGULAR_TOL * m.s0 * m.s2 || det <= 0.0 {
        return None;
    }
    Some((m.s2 * m.t0 - m.s1 * m.t1) / det)
}

fn check_inputs_1d(x: &[f64], y: &[f64], w: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(ProfitError::Dimension(
            "x, y and weights must have equal length".into(),
        ));
    }
    if x.iter().chain(y).chain(w).any(|v| !v.is_finite()) {
        return Err(ProfitError::Validation("non-finite smoother input".into()));
    }
    if w.iter().any(|&v| v < 0.0) {
        return Err(ProfitError::Validation("negative smoother weight".into()));
    }
    Ok(())
}

fn fit_1d_fixed(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    eval: &[f64],
    kernel: Kernel,
    h: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut values = Vec::with_capacity(eval.len());
    let mut fallbacks = Vec::new();
    for (j, &e) in eval.iter().enumerate() {
        let m = moments_1d(x, y, w, e, kernel, h);
        if !(m.s0 > 0.0) {
            return Err(ProfitError::Smoother(format!(
                "empty kernel window at evaluation point {e} (bandwidth {h})"
            )));
        }
        match intercept_1d(&m) {
            Some(v) => values.push(v),
            None => {
                fallbacks.push(j);
                values.push(m.t0 / m.s0);
            }
        }
    }
    if !fallbacks.is_empty() {
        log::warn!(
            "local-linear: singular local design at {} evaluation point(s); used weighted mean",
            fallbacks.len()
        );
    }
    Ok((values, fallbacks))
}

/// Univariate local-linear smoother evaluated at `eval`.
///
/// With a GCV bandwidth the candidates are scored on the data points
/// themselves; candidates with an empty or singular window are infeasible.
pub fn local_linear_1d(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    eval: &[f64],
    cfg: &KernelConfig,
) -> Result<LocalLinearFit> {
    check_inputs_1d(x, y, w)?;
    if x.is_empty() {
        return Err(ProfitError::Smoother("no points to smooth".into()));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut uniq = x.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let spacing = if uniq.len() > 1 {
        (hi - lo) / (uniq.len() - 1) as f64
    } else {
        1.0
    };
    let candidates = cfg.candidates(spacing, (hi - lo).max(spacing))?;
    let (h, gcv) = if candidates.len() == 1 {
        (candidates[0], None)
    } else {
        let k0 = cfg.kernel.eval(0.0);
        let sel = gcv_select(&candidates, |h| {
            let mut rss = 0.0;
            let mut tr = 0.0;
            for i in 0..x.len() {
                let m = moments_1d(x, y, w, x[i], cfg.kernel, h);
                let det = m.s0 * m.s2 - m.s1 * m.s1;
                let a0 = intercept_1d(&m)?;
                rss += w[i] * (y[i] - a0).powi(2);
                tr += k0 * w[i] * m.s2 / det;
            }
            Some(GcvPoint {
                rss,
                trace: tr,
                n: x.len() as f64,
            })
        })?;
        (sel.chosen, Some(sel))
    };
    let (values, fallbacks) = fit_1d_fixed(x, y, w, eval, cfg.kernel, h)?;
    Ok(LocalLinearFit {
        values,
        bandwidth: h,
        fallbacks,
        gcv,
    })
}

/// Kernel moments of a bivariate local plane fit.
#[derive(Debug, Clone, Copy, Default)]
struct Moments2 {
    v00: f64,
    v10: f64,
    v01: f64,
    v20: f64,
    v02: f64,
    v11: f64,
    r00: f64,
    r10: f64,
    r01: f64,
}

impl Moments2 {
    /// Cofactors of the first column of the normal matrix.
    fn cofactors(&self) -> (f64, f64, f64) {
        (
            self.v20 * self.v02 - self.v11 * self.v11,
            self.v10 * self.v02 - self.v01 * self.v11,
            self.v01 * self.v20 - self.v10 * self.v11,
        )
    }

    fn det(&self) -> f64 {
        let (c0, c1, c2) = self.cofactors();
        c0 * self.v00 - c1 * self.v10 - c2 * self.v01
    }

    fn singular(&self) -> bool {
        let d = self.det();
        let scale = self.v00 * self.v20 * self.v02;
        !(self.v00 > 0.0) || !(d > SINGULAR_TOL * scale) || !(d > 0.0)
    }

    fn intercept(&self) -> f64 {
        let (c0, c1, c2) = self.cofactors();
        (c0 * self.r00 - c1 * self.r10 - c2 * self.r01) / self.det()
    }

    /// Hat-matrix diagonal entry for a data point sitting at the
    /// evaluation location with kernel-times-weight mass `k`.
    fn self_leverage(&self, k: f64) -> f64 {
        k * self.cofactors().0 / self.det()
    }
}

fn moments_2d(points: &[WeightedPoint2], e1: f64, e2: f64, kernel: Kernel, h: f64) -> Moments2 {
    let mut m = Moments2::default();
    for p in points {
        let u = (p.x1 - e1) / h;
        let v = (p.x2 - e2) / h;
        let k = kernel.eval(u) * kernel.eval(v) * p.weight;
        if k == 0.0 {
            continue;
        }
        m.v00 += k;
        m.v10 += k * u;
        m.v01 += k * v;
        m.v20 += k * u * u;
        m.v02 += k * v * v;
        m.v11 += k * u * v;
        m.r00 += k * p.value;
        m.r10 += k * u * p.value;
        m.r01 += k * v * p.value;
    }
    m
}

fn check_points(points: &[WeightedPoint2]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if !(p.x1.is_finite() && p.x2.is_finite() && p.value.is_finite() && p.weight.is_finite()) {
            return Err(ProfitError::Validation(format!(
                "non-finite input at point {i}"
            )));
        }
        if p.weight < 0.0 {
            return Err(ProfitError::Validation(format!(
                "negative weight at point {i}"
            )));
        }
    }
    Ok(())
}

/// Bivariate local-linear smoother on scattered points with a product
/// kernel, evaluated at `eval`.
pub fn local_linear_2d(
    points: &[WeightedPoint2],
    eval: &[(f64, f64)],
    cfg: &KernelConfig,
) -> Result<LocalLinearFit> {
    check_points(points)?;
    if points.is_empty() {
        return Err(ProfitError::Smoother("no points to smooth".into()));
    }
    if eval.iter().any(|e| !(e.0.is_finite() && e.1.is_finite())) {
        return Err(ProfitError::Validation("non-finite evaluation point".into()));
    }
    let span = |f: fn(&WeightedPoint2) -> f64| {
        let (lo, hi) = points
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        hi - lo
    };
    let domain = span(|p| p.x1).max(span(|p| p.x2)).max(f64::MIN_POSITIVE);
    let spacing = domain / (points.len() as f64).sqrt().max(1.0);
    let candidates = cfg.candidates(spacing, domain)?;
    let (h, gcv) = if candidates.len() == 1 {
        (candidates[0], None)
    } else {
        let k0 = cfg.kernel.eval(0.0).powi(2);
        let sel = gcv_select(&candidates, |h| {
            let mut rss = 0.0;
            let mut tr = 0.0;
            for p in points {
                let m = moments_2d(points, p.x1, p.x2, cfg.kernel, h);
                if m.singular() {
                    return None;
                }
                rss += p.weight * (p.value - m.intercept()).powi(2);
                tr += m.self_leverage(k0 * p.weight);
            }
            Some(GcvPoint {
                rss,
                trace: tr,
                n: points.len() as f64,
            })
        })?;
        (sel.chosen, Some(sel))
    };
    let mut values = Vec::with_capacity(eval.len());
    for &(e1, e2) in eval {
        let m = moments_2d(points, e1, e2, cfg.kernel, h);
        if m.singular() {
            return Err(ProfitError::Smoother(format!(
                "degenerate kernel window at ({e1}, {e2}) with bandwidth {h}: \
                 fewer than 3 non-collinear points"
            )));
        }
        values.push(m.intercept());
    }
    Ok(LocalLinearFit {
        values,
        bandwidth: h,
        fallbacks: Vec::new(),
        gcv,
    })
}

/// Result of [`local_linear_2d_grid`].
#[derive(Debug, Clone)]
pub struct GridSmooth {
    /// Smoothed values at every `(grid[a], grid[b])`.
    pub values: DMatrix<f64>,
    pub bandwidth: f64,
    pub gcv: Option<GcvSelection>,
}

/// `A_p[e, r] = K((s_r − s_e)/h)·((s_r − s_e)/h)^p` for `p = 0, 1, 2`.
fn kernel_matrices(grid: &[f64], kernel: Kernel, h: f64) -> [DMatrix<f64>; 3] {
    let r = grid.len();
    let mut a = [
        DMatrix::zeros(r, r),
        DMatrix::zeros(r, r),
        DMatrix::zeros(r, r),
    ];
    for e in 0..r {
        for j in 0..r {
            let u = (grid[j] - grid[e]) / h;
            let k = kernel.eval(u);
            a[0][(e, j)] = k;
            a[1][(e, j)] = k * u;
            a[2][(e, j)] = k * u * u;
        }
    }
    a
}

struct GridMoments {
    m: Vec<Moments2>,
    r: usize,
}

fn grid_moments(
    grid: &[f64],
    values: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    kernel: Kernel,
    h: f64,
) -> GridMoments {
    let r = grid.len();
    let [a0, a1, a2] = kernel_matrices(grid, kernel, h);
    let wy = weights.component_mul(values);
    // Right factors shared across products.
    let w_a0 = weights * a0.transpose();
    let w_a1 = weights * a1.transpose();
    let w_a2 = weights * a2.transpose();
    let y_a0 = &wy * a0.transpose();
    let y_a1 = &wy * a1.transpose();
    let v00 = &a0 * &w_a0;
    let v10 = &a1 * &w_a0;
    let v01 = &a0 * &w_a1;
    let v20 = &a2 * &w_a0;
    let v02 = &a0 * &w_a2;
    let v11 = &a1 * &w_a1;
    let r00 = &a0 * &y_a0;
    let r10 = &a1 * &y_a0;
    let r01 = &a0 * &y_a1;
    let mut m = Vec::with_capacity(r * r);
    for i in 0..r {
        for j in 0..r {
            m.push(Moments2 {
                v00: v00[(i, j)],
                v10: v10[(i, j)],
                v01: v01[(i, j)],
                v20: v20[(i, j)],
                v02: v02[(i, j)],
                v11: v11[(i, j)],
                r00: r00[(i, j)],
                r10: r10[(i, j)],
                r01: r01[(i, j)],
            });
        }
    }
    GridMoments { m, r }
}

/// Bivariate local-linear smoother for data observed on the full product
/// grid `grid × grid`, evaluated at the same grid. Entries with zero weight
/// (for example a masked diagonal) do not enter the fit. Equal to
/// [`local_linear_2d`] on the positively weighted cells.
pub fn local_linear_2d_grid(
    grid: &[f64],
    values: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    cfg: &KernelConfig,
) -> Result<GridSmooth> {
    let r = grid.len();
    if values.shape() != (r, r) || weights.shape() != (r, r) {
        return Err(ProfitError::Dimension(
            "grid smoother: values/weights must be square with the grid length".into(),
        ));
    }
    if r < 2 {
        return Err(ProfitError::Smoother("grid needs at least 2 points".into()));
    }
    if values.iter().chain(weights.iter()).any(|v| !v.is_finite()) {
        return Err(ProfitError::Validation("non-finite grid smoother input".into()));
    }
    if weights.iter().any(|&v| v < 0.0) {
        return Err(ProfitError::Validation("negative grid weight".into()));
    }
    let spacing = (grid[r - 1] - grid[0]) / (r - 1) as f64;
    let candidates = cfg.candidates(spacing, grid[r - 1] - grid[0])?;
    let n_obs = weights.iter().filter(|&&w| w > 0.0).count() as f64;
    let k0 = cfg.kernel.eval(0.0).powi(2);

    let (h, gcv) = if candidates.len() == 1 {
        (candidates[0], None)
    } else {
        let sel = gcv_select(&candidates, |h| {
            let gm = grid_moments(grid, values, weights, cfg.kernel, h);
            let mut rss = 0.0;
            let mut tr = 0.0;
            for i in 0..r {
                for j in 0..r {
                    let m = &gm.m[i * gm.r + j];
                    if m.singular() {
                        return None;
                    }
                    let w = weights[(i, j)];
                    if w <= 0.0 {
                        continue;
                    }
                    rss += w * (values[(i, j)] - m.intercept()).powi(2);
                    tr += m.self_leverage(k0 * w);
                }
            }
            Some(GcvPoint {
                rss,
                trace: tr,
                n: n_obs,
            })
        })?;
        (sel.chosen, Some(sel))
    };
    let gm = grid_moments(grid, values, weights, cfg.kernel, h);
    let mut out = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            let m = &gm.m[i * r + j];
            if m.singular() {
                return Err(ProfitError::Smoother(format!(
                    "degenerate kernel window at ({}, {}) with bandwidth {h}",
                    grid[i], grid[j]
                )));
            }
            out[(i, j)] = m.intercept();
        }
    }
    Ok(GridSmooth {
        values: out,
        bandwidth: h,
        gcv,
    })
}
