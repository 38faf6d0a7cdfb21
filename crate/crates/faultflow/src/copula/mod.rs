//! Vine-copula dependence modeling.

pub mod bivariate;
pub mod vine;

pub use bivariate::{
    fit_bivariate, fit_checkerboard, kendall_tau, BivariateCopula, CopulaError, Family, FitReport,
    Rotation,
};
pub use vine::{VineCopula, VineModel, VineModelSpec};
