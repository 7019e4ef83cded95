//! First-differenced GMM estimation of dynamic panel threshold models.
//!
//! The regression function switches (jump model) or changes slope (kink
//! model) when a threshold variable crosses an unknown location. Unit fixed
//! effects are removed by first differencing and the parameters are
//! estimated by two-step GMM: the threshold by grid search over pooled
//! quantiles, the slopes in closed form at each candidate. The crate also
//! provides the asymptotic covariance estimator with a kernel-smoothed
//! threshold Jacobian, a sup-Wald test of linearity with a fast multiplier
//! bootstrap, and Monte Carlo drivers for size and power experiments.
//!
//! Estimator and test follow Seo & Shin (2016), Journal of Econometrics
//! 195(2), 169-186.

pub mod avar;
pub mod error;
pub mod estimator;
pub(crate) mod linalg;
pub mod linearity;
pub mod moments;
pub mod panel;
pub(crate) mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use estimator::{
    closed_form_slopes, fit, grid_search, residuals, two_step_estimate, Estimate, FittedModel,
    GridSpec, ThresholdCoef, WeightStage,
};
pub use linearity::{bootstrap_linearity, linearity_test, sup_wald, wald_at, LinearityResult};
pub use moments::{
    build_g1, build_instruments, gmm_criterion, weight_first_step, weight_second_step,
    InstrumentSet, ModelSpec, MomentSystem,
};
pub use panel::{build_lag, first_difference, load_csv, PanelData, TransformedPanel};
pub use simulate::{
    generate_dgp, run_experiment, run_power_experiment, run_size_experiment, DgpParams,
    ExperimentDesign, ExperimentResult,
};
