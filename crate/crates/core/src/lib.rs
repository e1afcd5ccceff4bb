//! Calibration estimators for a mean (or other functionals) of a response
//! that is missing at random.

// NaN-aware guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod data;
pub mod estimators;
pub mod error;
pub mod fit;
pub mod formula;
pub mod inference;
pub mod calibration;
pub mod numeric;
pub mod rho;
pub mod simulation;

pub use calibration::{
    solve_centered, solve_lambda, solve_lambda_quadratic_closed_form, weight_diagnostics,
    CalibrationProblem, CalibrationResult, FeasibilityBox, WeightDiagnostics,
};
pub use data::{load_csv, read_csv, save_csv, write_csv, FullSample, ObservedSample};
pub use error::{Error, ErrorCategory, Result};
pub use fit::{
    fit_best_linear_predictor, fit_logistic_propensity, fit_propensity, fit_working, fit_working_logistic,
    fit_working_ols, BestLinearPredictorFit, BlpWeighting, PropensityFit, WorkingModel,
    WorkingModelSet,
};
pub use estimators::{
    estimate_aipw, estimate_cal, estimate_hajek, estimate_ipw, estimate_ols, multipurpose_estimate,
    EstimandSpec, Estimate, ResponseFunction,
};
pub use formula::{parse_formula, FeatureMap, FormulaSpec};
pub use numeric::{Matrix, NewtonOptions, NewtonReport};
pub use inference::{calibration_variance, plugin_variance, wald_ci, VariancePlugin};
pub use rho::RhoFunction;
pub use simulation::{McMetrics, McTable, ReplicateOutcome, Study};
