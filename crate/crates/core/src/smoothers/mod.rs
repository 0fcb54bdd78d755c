//! Nonparametric smoothers: local-linear kernel regression in one and two
//! dimensions, penalized B-splines (univariate, tensor product on scattered
//! points, and the grid "sandwich" form), and GCV tuning.

pub mod bspline;
pub mod gcv;
pub mod kernel;
pub mod local_linear;
pub mod pspline;

pub use bspline::{difference_penalty, BSplineBasis};
pub use gcv::{gcv_select, GcvPoint, GcvSelection};
pub use kernel::{Bandwidth, Kernel, KernelConfig};
pub use local_linear::{
    local_linear_1d, local_linear_2d, local_linear_2d_grid, GridSmooth, LocalLinearFit,
    WeightedPoint2,
};
pub use pspline::{
    default_penalty_grid, pspline_1d, pspline_1d_from_gram, pspline_1d_with, pspline_2d, KnotSpec,
    PSplineFit1d, PenaltySpec, SandwichFit, SplineConfig, SplineGram, Tensor2dOptions,
    TensorPSplineFit,
};
