//! PROFIT: projection-based testing of whether the mean of longitudinally
//! observed functional data changes over the longitudinal time axis.
//!
//! The pipeline follows the usual stages:
//!
//! 1. [`marginal::estimate_mean`] smooths the bivariate mean `μ(s, t)`;
//! 2. [`marginal::raw_marginal_covariance`] and
//!    [`marginal::smooth_marginal_covariance`] estimate the marginal
//!    covariance `Ξ(s, s')` of the demeaned curves;
//! 3. [`marginal::eigen_basis`] extracts the data-driven directions;
//! 4. each direction is tested with a pseudo likelihood ratio test on the
//!    pre-whitened projected series ([`prewhiten`], [`plrt`]);
//! 5. [`profit::bonferroni`] combines the per-direction p-values.
//!
//! [`competitors`] implements two L2-norm based alternatives on the same
//! projections and [`simstudy`] contains the synthetic generator and the
//! size/power/timing experiment drivers.

pub mod competitors;
pub mod data;
pub mod error;
pub mod linalg;
pub mod marginal;
pub mod plrt;
pub mod prewhiten;
pub mod profit;
pub mod rng;
pub mod simstudy;
pub mod smoothers;

pub use data::{BivariateSurface, LongitudinalFunctionalDataset, SubjectRecord};
pub use error::{ProfitError, Result};
pub use marginal::{MarginalBasis, MarginalCovariance, ProjectedSeries};
pub use profit::{run_profit, ProfitConfig, ProfitReport};
