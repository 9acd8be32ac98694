//! Every acceptance threshold in one table.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Monte Carlo band in standard errors.
    pub se_band: f64,
    /// Band for the many-entry covariance comparison.
    pub covariance_se_band: f64,
    pub stencil: f64,
    pub single_point_green: f64,
    pub green_residual: f64,
    pub green_symmetry: f64,
    pub gibbs_markov: f64,
    pub coefficients: f64,
    pub biharmonic: f64,
    pub monotonicity: f64,
    pub basis_reconstruction: f64,
    pub scaling_identity: f64,
    pub gamma_range: (f64, f64),
    pub increment_abs: f64,
    pub census_slope: (f64, f64),
    pub first_moment_rel: f64,
    pub overshoot_rate_rel: f64,
    pub tail_ratio_rel: f64,
    pub martingale_rel: f64,
    pub spectral_identity: f64,
    pub comparison_rel: f64,
    pub dyadic_scaling: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    se_band: 3.0,
    covariance_se_band: 5.0,
    stencil: 1e-12,
    single_point_green: 1e-10,
    green_residual: 1e-8,
    green_symmetry: 1e-7,
    gibbs_markov: 1e-8,
    coefficients: 1e-12,
    biharmonic: 1e-8,
    monotonicity: 1e-8,
    basis_reconstruction: 1e-6,
    scaling_identity: 1e-9,
    gamma_range: (0.71, 0.91),
    increment_abs: 0.3,
    census_slope: (3.0, 0.7),
    first_moment_rel: 0.25,
    overshoot_rate_rel: 0.20,
    tail_ratio_rel: 0.15,
    martingale_rel: 0.10,
    spectral_identity: 1e-10,
    comparison_rel: 0.15,
    dyadic_scaling: 0.1,
};
