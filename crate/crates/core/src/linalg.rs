//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ProfitError, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
/// Columns of the returned matrix are the matching unit eigenvectors.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Inverse square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues are floored at `rel_floor * λ_max` before inversion. Returns
/// the inverse square root and the floor that was applied.
pub fn inv_sqrt_psd(m: &DMatrix<f64>, rel_floor: f64) -> Result<(DMatrix<f64>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ProfitError::Validation("non-finite matrix entry".into()));
    }
    let (vals, vecs) = sym_eigen_desc(m);
    let lmax = vals.first().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return Err(ProfitError::Degenerate(
            "matrix has no positive eigenvalue".into(),
        ));
    }
    let floor = rel_floor * lmax;
    let scale = DVector::from_iterator(vals.len(), vals.iter().map(|&v| 1.0 / v.max(floor).sqrt()));
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= scale[j];
    }
    Ok((scaled * vecs.transpose(), floor))
}

/// Orthonormal basis of the column space of `x` via thin QR.
/// Fails when `x` is numerically rank deficient.
pub fn orthonormal_columns(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    if p == 0 {
        return Ok(DMatrix::zeros(x.nrows(), 0));
    }
    if x.nrows() < p {
        return Err(ProfitError::Rank(format!(
            "design has {} rows but {} columns",
            x.nrows(),
            p
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..p {
        if r[(i, i)].abs() <= 1e-10 * diag_max.max(f64::MIN_POSITIVE) {
            return Err(ProfitError::Rank(format!(
                "design column {i} is numerically dependent on the others"
            )));
        }
    }
    Ok(qr.q())
}

/// `n` points log-spaced between `lo` and `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    }
}

/// Composite Simpson rule on an equally spaced grid over `[a, b]`.
/// `values.len()` must be odd and at least 3.
pub fn simpson(values: &[f64], a: f64, b: f64) -> f64 {
    let n = values.len();
    debug_assert!(n >= 3 && n % 2 == 1);
    let h = (b - a) / (n - 1) as f64;
    let mut s = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

/// Linear interpolation on an increasing grid, clamped at the ends.
pub fn interp_linear(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if n == 1 || x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    let hi = grid.partition_point(|&g| g <= x).min(n - 1);
    let lo = hi - 1;
    let w = (x - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] * (1.0 - w) + values[hi] * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 4.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![5.0, 4.0, 1.0]);
        assert_abs_diff_eq!(vecs[(1, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (s, _) = inv_sqrt_psd(&m, 1e-8).unwrap();
        let id = &s * &m * &s;
        assert_abs_diff_eq!(id[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn simpson_integrates_cubic_exactly() {
        let xs: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let v: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        assert_abs_diff_eq!(simpson(&v, 0.0, 1.0), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn interpolation_clamps() {
        let g = [0.0, 1.0, 2.0];
        let v = [0.0, 10.0, 0.0];
        assert_eq!(interp_linear(&g, &v, -1.0), 0.0);
        assert_eq!(interp_linear(&g, &v, 0.5), 5.0);
        assert_eq!(interp_linear(&g, &v, 1.0), 10.0);
        assert_eq!(interp_linear(&g, &v, 9.0), 0.0);
    }

    #[test]
    fn dependent_columns_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(orthonormal_columns(&x).is_err());
    }
}
