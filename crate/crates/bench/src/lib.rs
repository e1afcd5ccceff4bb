//! Fixtures shared by the benchmarks.

use gelcal_core::fit::fit_logistic_propensity;
use gelcal_core::simulation::kang_schafer::LATENT_COLUMNS;
use gelcal_core::simulation::studies::{multiple_robust_features, CORRECT};
use gelcal_core::simulation::{generate_kang_schafer, KangSchaferConfig};
use gelcal_core::{CalibrationProblem, FeatureMap, Matrix, ObservedSample, RhoFunction};

pub fn kang_schafer_sample(n: usize, seed: u64) -> ObservedSample {
    generate_kang_schafer(&KangSchaferConfig {
        n,
        interaction: false,
        seed,
    })
    .expect("valid configuration")
    .observed
}

/// Calibration to the linear Z columns, plus their higher-order products
/// when `extended` is set, with a fitted propensity on Z.
pub fn calibration_problem(sample: &ObservedSample, rho: RhoFunction, extended: bool) -> CalibrationProblem {
    let linear = FeatureMap::linear(&LATENT_COLUMNS);
    let pi = fit_logistic_propensity(sample, &linear).expect("propensity fits").pi;
    let mut maps = vec![linear];
    if extended {
        maps.push(multiple_robust_features(CORRECT, &LATENT_COLUMNS));
    }
    let mut columns = Vec::new();
    for map in &maps {
        let design = map.design(sample.x(), sample.column_names()).expect("columns exist");
        columns.extend((1..design.cols()).map(|j| design.column(j)));
    }
    let u = Matrix::from_columns(&columns).expect("equal lengths");
    CalibrationProblem::new(u, sample.r().to_vec(), &pi, rho).expect("valid problem")
}
