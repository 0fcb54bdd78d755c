use nalgebra::DMatrix;

use crate::error::{ProfitError, Result};

pub const MAX_DEGREE: usize = 7;

/// B-spline basis of a given degree on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
    n_basis: usize,
    lo: f64,
    hi: f64,
}

/// Nonzero basis values at a point: `values[j]` belongs to basis function
/// `first + j`, for `j ≤ degree`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub values: [f64; MAX_DEGREE + 1],
}

impl BSplineBasis {
    /// Equally spaced knots extended beyond the domain (P-spline layout).
    pub fn uniform(lo: f64, hi: f64, n_basis: usize, degree: usize) -> Result<Self> {
        check_degree(degree)?;
        if !(hi > lo) {
            return Err(ProfitError::Config(format!(
                "spline domain [{lo}, {hi}] is empty"
            )));
        }
        if n_basis < degree + 1 {
            return Err(ProfitError::Config(format!(
                "{n_basis} basis functions is fewer than degree + 1 = {}",
                degree + 1
            )));
        }
        let segments = n_basis - degree;
        let dx = (hi - lo) / segments as f64;
        let knots = (0..n_basis + degree + 1)
            .map(|i| lo + (i as f64 - degree as f64) * dx)
            .collect();
        Ok(BSplineBasis {
            knots,
            degree,
            n_basis,
            lo,
            hi,
        })
    }

    /// Clamped basis with the given breakpoints (first and last are the
    /// domain ends; interior ones are the knots).
    pub fn from_breakpoints(breaks: &[f64], degree: usize) -> Result<Self> {
        check_degree(degree)?;
        if breaks.len() < 2 || breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ProfitError::Config(
                "spline breakpoints must be strictly increasing, at least two".into(),
            ));
        }
        let lo = breaks[0];
        let hi = *breaks.last().unwrap();
        let mut knots = vec![lo; degree];
        knots.extend_from_slice(breaks);
        knots.extend(std::iter::repeat_n(hi, degree));
        let n_basis = breaks.len() - 1 + degree;
        Ok(BSplineBasis {
            knots,
            degree,
            n_basis,
            lo,
            hi,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Nonzero basis values at `x`, with `x` clamped into the domain.
    pub fn eval_local(&self, x: f64) -> LocalBasis {
        let p = self.degree;
        let x = x.clamp(self.lo, self.hi);
        // Span i with knots[i] <= x < knots[i + 1], restricted to the domain.
        let upper = self.n_basis;
        let mut span = self.knots[p..=upper].partition_point(|&k| k <= x) + p - 1;
        span = span.clamp(p, upper - 1);

        let mut n = [0.0; MAX_DEGREE + 1];
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        LocalBasis {
            first: span - p,
            values: n,
        }
    }

    /// Full basis row at `x`.
    pub fn eval_row(&self, x: f64) -> Vec<f64> {
        let lb = self.eval_local(x);
        let mut row = vec![0.0; self.n_basis];
        for j in 0..=self.degree {
            row[lb.first + j] = lb.values[j];
        }
        row
    }

    /// Design matrix with one row per point.
    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(xs.len(), self.n_basis);
        for (i, &x) in xs.iter().enumerate() {
            let lb = self.eval_local(x);
            for j in 0..=self.degree {
                m[(i, lb.first + j)] = lb.values[j];
            }
        }
        m
    }
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(ProfitError::Config(format!(
            "spline degree {degree} above the supported maximum {MAX_DEGREE}"
        )));
    }
    Ok(())
}

/// `DᵀD` for the order-`order` difference matrix `D` on `n` coefficients.
pub fn difference_penalty(n: usize, order: usize) -> DMatrix<f64> {
    if order == 0 {
        return DMatrix::identity(n, n);
    }
    if order >= n {
        return DMatrix::zeros(n, n);
    }
    let mut d = DMatrix::<f64>::identity(n, n);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, n);
        for i in 0..rows {
            for j in 0..n {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    d.transpose() * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn partition_of_unity() {
        let b = BSplineBasis::uniform(0.0, 1.0, 12, 3).unwrap();
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            let s: f64 = b.eval_row(x).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
        let c = BSplineBasis::from_breakpoints(&[0.0, 0.2, 0.5, 0.9, 1.0], 3).unwrap();
        assert_eq!(c.n_basis(), 7);
        for i in 0..=200 {
            let x = i as f64 / 200.0;
            let s: f64 = c.eval_row(x).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_functions_have_linear_coefficients() {
        // Greville abscissae reproduce x exactly.
        let p = 3;
        let b = BSplineBasis::uniform(0.0, 1.0, 9, p).unwrap();
        let greville: Vec<f64> = (0..9)
            .map(|j| (1..=p).map(|k| b.knots[j + k]).sum::<f64>() / p as f64)
            .collect();
        for i in 0..=50 {
            let x = i as f64 / 50.0;
            let v: f64 = b.eval_row(x).iter().zip(&greville).map(|(a, g)| a * g).sum();
            assert_abs_diff_eq!(v, x, epsilon = 1e-12);
        }
    }

    #[test]
    fn penalty_null_space() {
        let p = difference_penalty(6, 2);
        let lin: Vec<f64> = (0..6).map(|i| 2.0 + 0.5 * i as f64).collect();
        let v = nalgebra::DVector::from_vec(lin);
        assert!((&p * &v).norm() < 1e-12);
        assert_abs_diff_eq!(p[(0, 0)], 1.0);
        assert_abs_diff_eq!(p[(2, 2)], 6.0);
    }

    #[test]
    fn too_few_basis_rejected() {
        assert!(BSplineBasis::uniform(0.0, 1.0, 3, 3).is_err());
        assert!(BSplineBasis::uniform(1.0, 1.0, 8, 3).is_err());
    }
}
