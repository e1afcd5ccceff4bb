//! Estimator grids for the Kang–Schafer experiments.
//!
//! Every grid has a "correct" group, where the missingness and outcome models
//! use the latent Z, and usually a "misspecified" group using the observed
//! transforms X instead.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimandSpec;
use crate::formula::{FeatureMap, Transform};
use crate::rho::RhoFunction;

use super::kang_schafer::{LATENT_COLUMNS, OBSERVED_COLUMNS};
use super::mc::{
    run_mc_study, CalibrationTarget, EstimatorKind, GridEntry, KangSchaferScenario, OutcomeModel,
};
use super::metrics::McTable;

pub const CORRECT: &str = "correct";
pub const MISSPECIFIED: &str = "misspecified";

/// Threshold of the tail probability in the multipurpose study.
pub const TAIL_THRESHOLD: f64 = 240.0;

pub fn standard_rhos() -> [RhoFunction; 3] {
    [
        RhoFunction::Quadratic,
        RhoFunction::EmpiricalLikelihood,
        RhoFunction::ExponentialTilting,
    ]
}

fn groups() -> [(&'static str, [&'static str; 4]); 2] {
    [(CORRECT, LATENT_COLUMNS), (MISSPECIFIED, OBSERVED_COLUMNS)]
}

/// Extra functions for the multiply robust estimators: all products of two
/// or more covariates, on the signed square-root scale for the skewed X.
pub fn multiple_robust_features(group: &str, cols: &[&str]) -> FeatureMap {
    let transform = if group == CORRECT {
        Transform::Identity
    } else {
        Transform::SignedSqrt
    };
    FeatureMap::transformed_interactions(cols, 2..=cols.len(), transform)
}

fn entry(group: &str, label: String, cols: &[&str], estimand: EstimandSpec, kind: EstimatorKind) -> GridEntry {
    GridEntry {
        group: group.to_string(),
        label,
        propensity: FeatureMap::linear(cols),
        estimand,
        kind,
    }
}

fn cal(target: CalibrationTarget, rho: RhoFunction, variance: bool) -> EstimatorKind {
    EstimatorKind::Cal {
        target,
        rho,
        bounded: false,
        variance,
    }
}

/// IPW, AIPW and least-squares prediction against the doubly and multiply
/// robust calibration estimators under each ρ.
pub fn comparison_grid() -> Vec<GridEntry> {
    let mut grid = Vec::new();
    for (group, cols) in groups() {
        let linear = FeatureMap::linear(&cols);
        let ls = OutcomeModel::least_squares(linear.clone());
        let mean = || EstimandSpec::Mean;
        grid.push(entry(group, "ipw".into(), &cols, mean(), EstimatorKind::Ipw));
        grid.push(entry(group, "aipw".into(), &cols, mean(), EstimatorKind::Aipw { outcome: ls.clone() }));
        grid.push(entry(group, "ols".into(), &cols, mean(), EstimatorKind::Prediction { outcome: ls }));
        for (suffix, target) in [
            ("dr", CalibrationTarget::Features(vec![linear.clone()])),
            (
                "mr",
                CalibrationTarget::Features(vec![linear.clone(), multiple_robust_features(group, &cols)]),
            ),
        ] {
            for rho in standard_rhos() {
                grid.push(entry(
                    group,
                    format!("cal:{rho}:{suffix}"),
                    &cols,
                    mean(),
                    cal(target.clone(), rho, true),
                ));
            }
        }
    }
    grid
}

/// Doubly robust calibration estimators with plug-in standard errors.
pub fn standard_error_grid() -> Vec<GridEntry> {
    let mut grid = Vec::new();
    for (group, cols) in groups() {
        let target = CalibrationTarget::Features(vec![FeatureMap::linear(&cols)]);
        for rho in standard_rhos() {
            grid.push(entry(
                group,
                format!("cal:{rho}"),
                &cols,
                EstimandSpec::Mean,
                cal(target.clone(), rho, true),
            ));
        }
    }
    grid
}

/// Least-squares fits on (1, z1), (1, z1, z2), ... ; the k-th entry of the
/// result is the model using the first k latent columns.
pub fn nested_models() -> Vec<OutcomeModel> {
    (1..=LATENT_COLUMNS.len())
        .map(|k| OutcomeModel::least_squares(FeatureMap::linear(&LATENT_COLUMNS[..k])))
        .collect()
}

/// Calibration to the first 1, 2, 3 and 4 nested models, with the
/// missingness model correct (Z) or misspecified (X). Only the fourth model
/// is the true outcome regression.
pub fn nested_models_grid() -> Vec<GridEntry> {
    let models = nested_models();
    let mut grid = Vec::new();
    for (group, cols) in groups() {
        for rho in standard_rhos() {
            for k in 1..=models.len() {
                grid.push(entry(
                    group,
                    format!("cal:{rho}:models={k}"),
                    &cols,
                    EstimandSpec::Mean,
                    cal(CalibrationTarget::Predictions(models[..k].to_vec()), rho.clone(), false),
                ));
            }
        }
    }
    grid
}

/// Mean and P(Y > 240) from one weight vector. The outcome models are a
/// least-squares fit and a logistic fit of the exceedance, both linear in Z;
/// the groups differ in the missingness model.
pub fn multipurpose_grid() -> Vec<GridEntry> {
    let z = FeatureMap::linear(&LATENT_COLUMNS);
    let m1 = OutcomeModel::least_squares(z.clone());
    let m2 = OutcomeModel::Logistic {
        features: z,
        threshold: TAIL_THRESHOLD,
    };
    let targets = [
        ("cal:m1", vec![m1.clone()]),
        ("cal:m2", vec![m2.clone()]),
        ("cal:m1+m2", vec![m1, m2]),
    ];
    let mut grid = Vec::new();
    for (group, cols) in groups() {
        for estimand in [EstimandSpec::Mean, EstimandSpec::TailProbability { threshold: TAIL_THRESHOLD }] {
            grid.push(entry(group, "ipw".into(), &cols, estimand.clone(), EstimatorKind::Ipw));
            for (label, models) in &targets {
                grid.push(entry(
                    group,
                    label.to_string(),
                    &cols,
                    estimand.clone(),
                    cal(CalibrationTarget::Predictions(models.clone()), RhoFunction::Quadratic, false),
                ));
            }
        }
    }
    grid
}

/// Calibration to the true outcome regression alone and together with two
/// irrelevant working models (a quadratic in Z and a linear fit in X).
pub fn oracle_grid() -> Vec<GridEntry> {
    let truth = OutcomeModel::least_squares(FeatureMap::linear(&LATENT_COLUMNS));
    let junk_quadratic = OutcomeModel::least_squares(FeatureMap::transformed(&LATENT_COLUMNS, Transform::Square));
    let junk_linear = OutcomeModel::least_squares(FeatureMap::linear(&OBSERVED_COLUMNS));
    vec![
        entry(
            CORRECT,
            "cal:true".into(),
            &LATENT_COLUMNS,
            EstimandSpec::Mean,
            cal(CalibrationTarget::Predictions(vec![truth.clone()]), RhoFunction::Quadratic, false),
        ),
        entry(
            CORRECT,
            "cal:true+junk".into(),
            &LATENT_COLUMNS,
            EstimandSpec::Mean,
            cal(
                CalibrationTarget::Predictions(vec![truth, junk_quadratic, junk_linear]),
                RhoFunction::Quadratic,
                false,
            ),
        ),
    ]
}

/// The Kang–Schafer experiments available to the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// Estimator comparison on the additive design.
    Comparison,
    /// The same comparison with the 20·Z₁Z₂ term in the mean.
    Interaction,
    StandardErrors,
    NestedModels,
    Multipurpose,
    Oracle,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::Comparison,
        Study::Interaction,
        Study::StandardErrors,
        Study::NestedModels,
        Study::Multipurpose,
        Study::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::Comparison => "comparison",
            Study::Interaction => "interaction",
            Study::StandardErrors => "standard-errors",
            Study::NestedModels => "nested-models",
            Study::Multipurpose => "multipurpose",
            Study::Oracle => "oracle",
        }
    }

    pub fn grid(self) -> Vec<GridEntry> {
        match self {
            Study::Comparison | Study::Interaction => comparison_grid(),
            Study::StandardErrors => standard_error_grid(),
            Study::NestedModels => nested_models_grid(),
            Study::Multipurpose => multipurpose_grid(),
            Study::Oracle => oracle_grid(),
        }
    }

    pub fn scenario(self, n: usize) -> KangSchaferScenario {
        KangSchaferScenario {
            n,
            interaction: self == Study::Interaction,
        }
    }

    pub fn run(self, n: usize, n_reps: usize, base_seed: u64, parallelism: usize) -> Result<McTable> {
        let mut table = run_mc_study(&self.scenario(n), &self.grid(), n_reps, base_seed, parallelism)?;
        table.title = format!("{} (n={n}, {n_reps} replicates)", self.name());
        Ok(table)
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown study {s:?}")))
    }
}

/// Calibration with 1–4 nested working models under correct and misspecified
/// missingness.
pub fn run_nested_models_study(n: usize, n_reps: usize, seed: u64, parallelism: usize) -> Result<McTable> {
    Study::NestedModels.run(n, n_reps, seed, parallelism)
}
