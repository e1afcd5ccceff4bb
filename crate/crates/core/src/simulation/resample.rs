//! Repeated subsampling of a fully observed data set.
//!
//! The full-sample value of each estimand is the target; every replicate
//! hides responses according to a known logistic missingness model and the
//! estimators are run as if only the retained responses were seen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::FullSample;
use crate::error::{Error, Result};
use crate::estimators::EstimandSpec;
use crate::fit::logistic;
use crate::formula::{Comparison, Factor, FeatureMap, Term};
use crate::numeric::{dot, Matrix};
use crate::rho::RhoFunction;

use super::kang_schafer::{open_uniform, ScenarioReplicate};
use super::mc::{run_mc_study, CalibrationTarget, EstimatorKind, GridEntry, OutcomeModel, Scenario};
use super::metrics::McTable;
use super::studies::{CORRECT, MISSPECIFIED};

/// logit P(r = 1 | x) = design(x) · coefficients, intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessModel {
    pub features: FeatureMap,
    pub coefficients: Vec<f64>,
}

impl MissingnessModel {
    pub fn new(features: FeatureMap, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != features.width() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} design columns",
                coefficients.len(),
                features.width()
            )));
        }
        Ok(Self { features, coefficients })
    }

    pub fn probabilities(&self, x: &Matrix, column_names: &[String]) -> Result<Vec<f64>> {
        let design = self.features.design(x, column_names)?;
        Ok(design.row_iter().map(|row| logistic(dot(row, &self.coefficients))).collect())
    }
}

/// Subsamples of a fixed data set drawn with known response probabilities.
#[derive(Debug, Clone)]
pub struct ResamplingScenario {
    full: FullSample,
    pi: Vec<f64>,
}

impl ResamplingScenario {
    pub fn new(full: FullSample, truth: &MissingnessModel) -> Result<Self> {
        let pi = truth.probabilities(full.x(), full.column_names())?;
        Ok(Self { full, pi })
    }

    pub fn full(&self) -> &FullSample {
        &self.full
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.pi
    }
}

impl Scenario for ResamplingScenario {
    fn replicate(&self, seed: u64) -> Result<ScenarioReplicate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<bool> = self.pi.iter().map(|&p| open_uniform(&mut rng) < p).collect();
        if !r.iter().any(|&v| v) {
            return Err(Error::TooFewCompleteCases { needed: 1, have: 0 });
        }
        let observed = self.full.mask(r)?;
        Ok(ScenarioReplicate {
            full: self.full.clone(),
            observed,
        })
    }

    fn truth(&self, estimand: &EstimandSpec) -> Result<f64> {
        let h = estimand.h();
        Ok(self.full.y().iter().map(|&y| h.apply(y)).sum::<f64>() / self.full.n() as f64)
    }

    fn describe(&self) -> String {
        format!("resampling n={}", self.full.n())
    }
}

/// Inverse probability weighting and quadratic calibration to (b) a linear
/// working model, (c) a logistic model for I(y > threshold) and (d) both,
/// for the mean and the exceedance probability, once under each missingness
/// model.
pub fn resampling_grid(
    correct: &FeatureMap,
    misspecified: &FeatureMap,
    outcome_features: &FeatureMap,
    threshold: f64,
) -> Vec<GridEntry> {
    let m1 = OutcomeModel::least_squares(outcome_features.clone());
    let m2 = OutcomeModel::Logistic {
        features: outcome_features.clone(),
        threshold,
    };
    let targets = [
        ("cal:linear", vec![m1.clone()]),
        ("cal:logistic", vec![m2.clone()]),
        ("cal:both", vec![m1, m2]),
    ];
    let mut grid = Vec::new();
    for (group, propensity) in [(CORRECT, correct), (MISSPECIFIED, misspecified)] {
        for estimand in [EstimandSpec::Mean, EstimandSpec::TailProbability { threshold }] {
            grid.push(GridEntry {
                group: group.into(),
                label: "ipw".into(),
                propensity: propensity.clone(),
                estimand: estimand.clone(),
                kind: EstimatorKind::Ipw,
            });
            for (label, models) in &targets {
                grid.push(GridEntry {
                    group: group.into(),
                    label: label.to_string(),
                    propensity: propensity.clone(),
                    estimand: estimand.clone(),
                    kind: EstimatorKind::Cal {
                        target: CalibrationTarget::Predictions(models.clone()),
                        rho: RhoFunction::Quadratic,
                        bounded: false,
                        variance: false,
                    },
                });
            }
        }
    }
    grid
}

/// Runs `grid` on `reps` subsamples of `full` drawn under `truth`. Bias is
/// reported against the full-sample values, with RB% and the MSE ratio to
/// IPW in the same group.
pub fn resampling_study(
    full: &FullSample,
    truth: &MissingnessModel,
    grid: &[GridEntry],
    reps: usize,
    seed: u64,
    parallelism: usize,
) -> Result<McTable> {
    let scenario = ResamplingScenario::new(full.clone(), truth)?;
    let mut table = run_mc_study(&scenario, grid, reps, seed, parallelism)?;
    table.title = format!("resampling study (N={}, {reps} subsamples)", full.n());
    Ok(table)
}

/// Threshold for the exceedance probability of the synthetic expenditures.
pub const EXPENDITURE_THRESHOLD: f64 = 5000.0;

/// Household-level stand-in for an outpatient expenditure survey: family
/// size `x1`, outpatient visits `x2` and total expenditure `y`, right-skewed
/// with a point mass at zero.
pub fn synthetic_expenditure(n: usize, seed: u64) -> Result<FullSample> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_excess = Poisson::new(1.6).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let cost = LogNormal::new(5.9, 0.9).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let size = (1.0_f64 + size_excess.sample(&mut rng)).min(10.0);
        let rate_mean = 1.0 + 0.9 * size;
        let shape = 0.7;
        let rate = Gamma::new(shape, rate_mean / shape)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .sample(&mut rng);
        let visits: f64 = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(&mut rng)
        } else {
            0.0
        };
        let spend = if visits > 0.0 { visits * cost.sample(&mut rng) } else { 0.0 };
        x[(i, 0)] = size;
        x[(i, 1)] = visits;
        y.push(spend);
    }
    FullSample::new(y, x, vec!["x1".into(), "x2".into()])
}

/// Features x1 + x1:I(x1>=3) + x2 of the response model for the synthetic
/// data; without `x2` when `with_visits` is false.
pub fn expenditure_missingness_features(with_visits: bool) -> FeatureMap {
    let mut terms = vec![
        Term::single(Factor::column("x1")),
        Term {
            factors: vec![
                Factor::column("x1"),
                Factor::Indicator {
                    name: "x1".into(),
                    cmp: Comparison::Ge,
                    threshold: 3.0,
                },
            ],
        },
    ];
    if with_visits {
        terms.push(Term::single(Factor::column("x2")));
    }
    FeatureMap::new(terms)
}

/// Response model used to subsample the synthetic data: larger households
/// respond less often, frequent users more often.
pub fn expenditure_missingness() -> MissingnessModel {
    MissingnessModel {
        features: expenditure_missingness_features(true),
        coefficients: vec![-0.2, -0.35, 0.2, 0.22],
    }
}

/// The standard resampling grid for the synthetic data.
pub fn expenditure_grid() -> Vec<GridEntry> {
    resampling_grid(
        &expenditure_missingness_features(true),
        &expenditure_missingness_features(false),
        &FeatureMap::linear(&["x1", "x2"]),
        EXPENDITURE_THRESHOLD,
    )
}
