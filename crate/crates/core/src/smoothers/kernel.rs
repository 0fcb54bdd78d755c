use serde::{Deserialize, Serialize};

use crate::error::{ProfitError, Result};
use crate::linalg::{logspace, simpson};

/// Symmetric densities supported on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    Biweight,
    Triweight,
    Triangular,
    Uniform,
}

impl Kernel {
    pub fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        if a > 1.0 {
            return 0.0;
        }
        let q = 1.0 - u * u;
        match self {
            Kernel::Epanechnikov => 0.75 * q,
            Kernel::Biweight => 15.0 / 16.0 * q * q,
            Kernel::Triweight => 35.0 / 32.0 * q * q * q,
            Kernel::Triangular => 1.0 - a,
            Kernel::Uniform => 0.5,
        }
    }

    /// Scaled kernel `K_h(x) = K(x / h) / h`.
    pub fn scaled(self, x: f64, h: f64) -> f64 {
        self.eval(x / h) / h
    }

    /// Numerical check that the kernel is a symmetric density on `[-1, 1]`.
    pub fn check(self) -> Result<()> {
        let n = 20_001;
        let vals: Vec<f64> = (0..n)
            .map(|i| self.eval(-1.0 + 2.0 * i as f64 / (n - 1) as f64))
            .collect();
        let mass = simpson(&vals, -1.0, 1.0);
        if (mass - 1.0).abs() > 1e-6 {
            return Err(ProfitError::Config(format!(
                "kernel {self:?} integrates to {mass}, not 1"
            )));
        }
        let asym = (0..=100)
            .map(|i| i as f64 / 100.0)
            .map(|u| (self.eval(u) - self.eval(-u)).abs())
            .fold(0.0, f64::max);
        if asym > 1e-12 {
            return Err(ProfitError::Config(format!("kernel {self:?} not symmetric")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// GCV over the given candidates.
    Gcv(Vec<f64>),
    /// GCV over 10 log-spaced values from twice the data spacing to half the
    /// domain length.
    GcvDefault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kernel: Kernel::Epanechnikov,
            bandwidth: Bandwidth::GcvDefault,
        }
    }
}

impl KernelConfig {
    pub fn fixed(h: f64) -> Self {
        KernelConfig {
            kernel: Kernel::Epanechnikov,
            bandwidth: Bandwidth::Fixed(h),
        }
    }

    /// Candidate bandwidths, ascending, given the data spacing and the
    /// domain length.
    pub fn candidates(&self, spacing: f64, domain: f64) -> Result<Vec<f64>> {
        let c = match &self.bandwidth {
            Bandwidth::Fixed(h) => vec![*h],
            Bandwidth::Gcv(g) => {
                let mut g = g.clone();
                g.sort_by(f64::total_cmp);
                g
            }
            Bandwidth::GcvDefault => default_bandwidth_grid(spacing, domain),
        };
        if c.is_empty() {
            return Err(ProfitError::Config("empty bandwidth grid".into()));
        }
        if c.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(ProfitError::Config("bandwidths must be positive".into()));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.check()?;
        self.candidates(1.0, 1.0).map(|_| ())
    }
}

pub fn default_bandwidth_grid(spacing: f64, domain: f64) -> Vec<f64> {
    let lo = 2.0 * spacing;
    let hi = (0.5 * domain).max(lo);
    logspace(lo, hi, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_kernels_are_symmetric_densities() {
        for k in [
            Kernel::Epanechnikov,
            Kernel::Biweight,
            Kernel::Triweight,
            Kernel::Triangular,
            Kernel::Uniform,
        ] {
            k.check().unwrap();
        }
    }

    #[test]
    fn epanechnikov_values() {
        assert_eq!(Kernel::Epanechnikov.eval(0.0), 0.75);
        assert_eq!(Kernel::Epanechnikov.eval(1.0), 0.0);
        assert_eq!(Kernel::Epanechnikov.eval(-1.5), 0.0);
        assert_eq!(Kernel::Epanechnikov.scaled(0.0, 0.5), 1.5);
    }

    #[test]
    fn default_grid_spans_range() {
        let g = default_bandwidth_grid(0.01, 1.0);
        assert_eq!(g.len(), 10);
        assert!((g[0] - 0.02).abs() < 1e-15);
        assert!((g[9] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        assert!(KernelConfig::fixed(0.0).validate().is_err());
        assert!(KernelConfig::fixed(-1.0).validate().is_err());
    }
}
