//! Monte Carlo driver: replicate generation, per-replicate fitting and
//! aggregation into metric tables.

use std::collections::HashMap;
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{solve_lambda, CalibrationProblem, CalibrationResult, FeasibilityBox};
use crate::data::ObservedSample;
use crate::error::{Error, Result};
use crate::estimators::{estimate_aipw_of, estimate_cal_of, estimate_hajek, estimate_ipw_of, EstimandSpec};
use crate::fit::{
    fit_propensity, fit_working_logistic, fit_working_ols, PropensityFit, WorkingModel, WorkingModelSet,
};
use crate::formula::FeatureMap;
use crate::inference::calibration_variance;
use crate::numeric::Matrix;
use crate::rho::RhoFunction;

use super::kang_schafer::{generate_kang_schafer, tail_probability, KangSchaferConfig, ScenarioReplicate, TRUE_MEAN};
use super::metrics::{summarize, McTable, ReplicateOutcome};

/// Nominal level of the intervals whose coverage is reported.
pub const COVERAGE_LEVEL: f64 = 0.95;

/// A source of simulated data sets with known target values.
pub trait Scenario: Sync {
    fn replicate(&self, seed: u64) -> Result<ScenarioReplicate>;
    fn truth(&self, estimand: &EstimandSpec) -> Result<f64>;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KangSchaferScenario {
    pub n: usize,
    pub interaction: bool,
}

impl Scenario for KangSchaferScenario {
    fn replicate(&self, seed: u64) -> Result<ScenarioReplicate> {
        generate_kang_schafer(&KangSchaferConfig {
            n: self.n,
            interaction: self.interaction,
            seed,
        })
    }

    fn truth(&self, estimand: &EstimandSpec) -> Result<f64> {
        Ok(match estimand {
            EstimandSpec::Mean => TRUE_MEAN,
            EstimandSpec::TailProbability { threshold } => tail_probability(*threshold, self.interaction),
        })
    }

    fn describe(&self) -> String {
        format!(
            "kang-schafer n={} interaction={}",
            self.n, self.interaction
        )
    }
}

/// A working outcome model fitted on the complete cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeModel {
    LeastSquares { features: FeatureMap },
    /// Logistic regression of I(y > threshold).
    Logistic { features: FeatureMap, threshold: f64 },
}

impl OutcomeModel {
    pub fn least_squares(features: FeatureMap) -> Self {
        OutcomeModel::LeastSquares { features }
    }

    pub fn label(&self) -> String {
        match self {
            OutcomeModel::LeastSquares { features } => format!("y ~ {features}"),
            OutcomeModel::Logistic { features, threshold } => format!("I(y>{threshold}) ~ {features}"),
        }
    }

    pub fn fit(&self, sample: &ObservedSample) -> Result<WorkingModel> {
        match self {
            OutcomeModel::LeastSquares { features } => fit_working_ols(sample, features),
            OutcomeModel::Logistic { features, threshold } => fit_working_logistic(sample, features, *threshold),
        }
    }
}

/// The functions u(x) whose full-sample means the weights reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "models", rename_all = "kebab-case")]
pub enum CalibrationTarget {
    /// The non-intercept design columns of each feature map, duplicates
    /// removed. Calibrating to the columns of a linear working model also
    /// calibrates to its fitted values.
    Features(Vec<FeatureMap>),
    /// Fitted values of each working model.
    Predictions(Vec<OutcomeModel>),
}

impl CalibrationTarget {
    fn key(&self) -> String {
        match self {
            CalibrationTarget::Features(maps) => {
                let parts: Vec<String> = maps.iter().map(|m| m.to_string()).collect();
                format!("features[{}]", parts.join("; "))
            }
            CalibrationTarget::Predictions(models) => {
                let parts: Vec<String> = models.iter().map(OutcomeModel::label).collect();
                format!("predictions[{}]", parts.join("; "))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum EstimatorKind {
    /// Returns the target value itself.
    Oracle,
    Ipw,
    Hajek,
    Aipw { outcome: OutcomeModel },
    /// Mean of a working model's fitted values over all units.
    Prediction { outcome: OutcomeModel },
    Cal {
        target: CalibrationTarget,
        rho: RhoFunction,
        /// Confine λ to the default feasibility box.
        bounded: bool,
        /// Attach plug-in standard errors.
        variance: bool,
    },
}

/// One row of a study: an estimator of an estimand under a propensity model.
#[derive(Debug, Clone)]
pub struct GridEntry {
    pub group: String,
    pub label: String,
    /// Logistic missingness model used by the weighting estimators.
    pub propensity: FeatureMap,
    pub estimand: EstimandSpec,
    pub kind: EstimatorKind,
}

/// Fits shared by the grid entries of one replicate.
struct ReplicateFits<'a> {
    sample: &'a ObservedSample,
    propensity: HashMap<String, Option<Rc<PropensityFit>>>,
    working: HashMap<String, Option<Rc<WorkingModel>>>,
    calibration: HashMap<String, Option<Rc<(Matrix, CalibrationResult)>>>,
}

impl<'a> ReplicateFits<'a> {
    fn new(sample: &'a ObservedSample) -> Self {
        Self {
            sample,
            propensity: HashMap::new(),
            working: HashMap::new(),
            calibration: HashMap::new(),
        }
    }

    fn propensity(&mut self, features: &FeatureMap) -> Option<Rc<PropensityFit>> {
        let sample = self.sample;
        self.propensity
            .entry(features.to_string())
            .or_insert_with(|| fit_propensity(sample, features).ok().map(Rc::new))
            .clone()
    }

    fn working(&mut self, model: &OutcomeModel) -> Option<Rc<WorkingModel>> {
        let sample = self.sample;
        self.working
            .entry(model.label())
            .or_insert_with(|| model.fit(sample).ok().map(Rc::new))
            .clone()
    }

    fn calibration_functions(&mut self, target: &CalibrationTarget) -> Option<Matrix> {
        match target {
            CalibrationTarget::Features(maps) => {
                let mut labels: Vec<String> = Vec::new();
                let mut columns: Vec<Vec<f64>> = Vec::new();
                for map in maps {
                    let design = map.design(self.sample.x(), self.sample.column_names()).ok()?;
                    for (j, label) in map.labels().into_iter().enumerate().skip(1) {
                        if !labels.contains(&label) {
                            labels.push(label);
                            columns.push(design.column(j));
                        }
                    }
                }
                let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
                Matrix::from_columns(&refs).ok()
            }
            CalibrationTarget::Predictions(models) => {
                let fitted = models
                    .iter()
                    .map(|m| self.working(m).map(|w| (*w).clone()))
                    .collect::<Option<Vec<_>>>()?;
                WorkingModelSet::new(fitted).ok().map(|s| s.predictions)
            }
        }
    }

    fn calibration(
        &mut self,
        propensity: &FeatureMap,
        target: &CalibrationTarget,
        rho: &RhoFunction,
        bounded: bool,
    ) -> Option<Rc<(Matrix, CalibrationResult)>> {
        let key = format!("{propensity}|{}|{rho}|{bounded}", target.key());
        if let Some(hit) = self.calibration.get(&key) {
            return hit.clone();
        }
        let solved = (|| {
            let prop = self.propensity(propensity)?;
            let u = self.calibration_functions(target)?;
            let problem = CalibrationProblem::new(u.clone(), self.sample.r().to_vec(), &prop.pi, rho.clone()).ok()?;
            let bounds = bounded.then(FeasibilityBox::default);
            let result = solve_lambda(&problem, bounds.as_ref()).ok()?;
            Some(Rc::new((u, result)))
        })();
        self.calibration.insert(key, solved.clone());
        solved
    }
}

fn evaluate(entry: &GridEntry, truth: f64, fits: &mut ReplicateFits<'_>) -> ReplicateOutcome {
    let sample = fits.sample;
    let h = entry.estimand.h();
    let plain = |value: f64| ReplicateOutcome::Estimate {
        value,
        se: None,
        restricted: false,
    };
    let outcome = match &entry.kind {
        EstimatorKind::Oracle => Some(plain(truth)),
        EstimatorKind::Ipw => fits
            .propensity(&entry.propensity)
            .and_then(|p| estimate_ipw_of(sample, &p, &h).ok())
            .map(|e| plain(e.value)),
        EstimatorKind::Hajek => {
            let p = fits.propensity(&entry.propensity);
            p.and_then(|p| {
                let mapped = sample.map_y(|y| h.apply(y)).ok()?;
                estimate_hajek(&mapped, &p).ok()
            })
            .map(|e| plain(e.value))
        }
        EstimatorKind::Aipw { outcome } => {
            let p = fits.propensity(&entry.propensity);
            let m = fits.working(outcome);
            p.zip(m)
                .and_then(|(p, m)| estimate_aipw_of(sample, &p, &m.predictions, &h).ok())
                .map(|e| plain(e.value))
        }
        EstimatorKind::Prediction { outcome } => fits.working(outcome).map(|m| {
            plain(m.predictions.iter().sum::<f64>() / m.predictions.len() as f64)
        }),
        EstimatorKind::Cal {
            target,
            rho,
            bounded,
            variance,
        } => fits
            .calibration(&entry.propensity, target, rho, *bounded)
            .and_then(|solved| {
                let (u, result) = &*solved;
                let value = estimate_cal_of(sample, result, &h).ok()?.value;
                let se = if *variance {
                    let p = fits.propensity(&entry.propensity)?;
                    calibration_variance(sample, &p, u, &h, value)
                        .ok()
                        .filter(|v| v.variance.is_finite())
                        .map(|v| v.se())
                } else {
                    None
                };
                Some(ReplicateOutcome::Estimate {
                    value,
                    se,
                    restricted: result.restricted,
                })
            }),
    };
    match outcome {
        Some(ReplicateOutcome::Estimate { value, .. }) if !value.is_finite() => ReplicateOutcome::Failed,
        Some(o) => o,
        None => ReplicateOutcome::Failed,
    }
}

/// Evaluates every grid entry on the replicate drawn with `seed`.
pub fn run_replicate(
    scenario: &dyn Scenario,
    grid: &[GridEntry],
    truths: &[f64],
    seed: u64,
) -> Vec<ReplicateOutcome> {
    let Ok(rep) = scenario.replicate(seed) else {
        return vec![ReplicateOutcome::Failed; grid.len()];
    };
    let mut fits = ReplicateFits::new(&rep.observed);
    grid.iter()
        .zip(truths)
        .map(|(entry, &truth)| evaluate(entry, truth, &mut fits))
        .collect()
}

/// Runs `n_reps` replicates, replicate k drawn with seed `base_seed + k`, on
/// a pool of `parallelism` threads. Replicates are collected in index order,
/// so the table does not depend on the number of threads.
pub fn run_mc_study(
    scenario: &dyn Scenario,
    grid: &[GridEntry],
    n_reps: usize,
    base_seed: u64,
    parallelism: usize,
) -> Result<McTable> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("estimator grid is empty".into()));
    }
    if n_reps == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    let truths = grid
        .iter()
        .map(|e| scenario.truth(&e.estimand))
        .collect::<Result<Vec<f64>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Vec<ReplicateOutcome>> = pool.install(|| {
        (0..n_reps)
            .into_par_iter()
            .map(|k| run_replicate(scenario, grid, &truths, base_seed.wrapping_add(k as u64)))
            .collect()
    });
    let rows = grid
        .iter()
        .enumerate()
        .map(|(j, entry)| {
            let column: Vec<ReplicateOutcome> = outcomes.iter().map(|o| o[j]).collect();
            summarize(
                &entry.group,
                &entry.label,
                &entry.estimand.label(),
                truths[j],
                &column,
                COVERAGE_LEVEL,
            )
        })
        .collect();
    Ok(McTable::new(scenario.describe(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z() -> FeatureMap {
        FeatureMap::linear(&["z1", "z2", "z3", "z4"])
    }

    fn small_grid() -> Vec<GridEntry> {
        let entry = |label: &str, kind| GridEntry {
            group: "correct".into(),
            label: label.into(),
            propensity: z(),
            estimand: EstimandSpec::Mean,
            kind,
        };
        vec![
            entry("oracle", EstimatorKind::Oracle),
            entry("ipw", EstimatorKind::Ipw),
            entry("ols", EstimatorKind::Prediction { outcome: OutcomeModel::least_squares(z()) }),
            entry(
                "cal",
                EstimatorKind::Cal {
                    target: CalibrationTarget::Features(vec![z()]),
                    rho: RhoFunction::Quadratic,
                    bounded: false,
                    variance: true,
                },
            ),
        ]
    }

    #[test]
    fn oracle_row_is_exact() {
        let scenario = KangSchaferScenario { n: 200, interaction: false };
        let t = run_mc_study(&scenario, &small_grid(), 5, 1, 1).unwrap();
        let o = t.row("correct", "oracle", "mean").unwrap();
        assert_eq!(o.bias, 0.0);
        assert_eq!(o.coverage, None);
        assert_eq!(o.n_reps, 5);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let scenario = KangSchaferScenario { n: 150, interaction: true };
        let a = run_mc_study(&scenario, &small_grid(), 12, 77, 1).unwrap();
        let b = run_mc_study(&scenario, &small_grid(), 12, 77, 4).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.bias.to_bits(), y.bias.to_bits());
            assert_eq!(x.sse.to_bits(), y.sse.to_bits());
        }
    }

    #[test]
    fn replicate_k_uses_offset_seed() {
        let scenario = KangSchaferScenario { n: 100, interaction: false };
        let grid = small_grid();
        let truths = vec![210.0; grid.len()];
        let direct = run_replicate(&scenario, &grid, &truths, 40 + 3);
        let t = run_mc_study(&scenario, &grid[1..2], 1, 43, 1).unwrap();
        match direct[1] {
            ReplicateOutcome::Estimate { value, .. } => assert_eq!(t.rows[0].bias, value - 210.0),
            ReplicateOutcome::Failed => panic!("ipw failed"),
        }
    }

    #[test]
    fn failures_are_counted() {
        let mut grid = small_grid();
        grid.push(GridEntry {
            group: "correct".into(),
            label: "bad".into(),
            propensity: FeatureMap::linear(&["nope"]),
            estimand: EstimandSpec::Mean,
            kind: EstimatorKind::Ipw,
        });
        let scenario = KangSchaferScenario { n: 100, interaction: false };
        let t = run_mc_study(&scenario, &grid, 3, 5, 1).unwrap();
        let bad = t.row("correct", "bad", "mean").unwrap();
        assert_eq!(bad.failed_reps, 3);
        assert_eq!(bad.n_reps, 0);
    }

    #[test]
    fn features_target_deduplicates_columns() {
        let rep = generate_kang_schafer(&KangSchaferConfig { n: 50, interaction: false, seed: 9 }).unwrap();
        let mut fits = ReplicateFits::new(&rep.observed);
        let u = fits
            .calibration_functions(&CalibrationTarget::Features(vec![
                z(),
                FeatureMap::interactions(&["z1", "z2", "z3", "z4"], 1..=2),
            ]))
            .unwrap();
        assert_eq!(u.cols(), 4 + 6);
        assert_eq!(u.column(0), rep.observed.x().column(0));
    }

    #[test]
    fn shared_weights_across_estimands() {
        let rep = generate_kang_schafer(&KangSchaferConfig { n: 300, interaction: false, seed: 4 }).unwrap();
        let mut fits = ReplicateFits::new(&rep.observed);
        let target = CalibrationTarget::Features(vec![z()]);
        let a = fits.calibration(&z(), &target, &RhoFunction::Quadratic, false).unwrap();
        let b = fits.calibration(&z(), &target, &RhoFunction::Quadratic, false).unwrap();
        assert!(Rc::ptr_eq(&a, &b));
    }
}
