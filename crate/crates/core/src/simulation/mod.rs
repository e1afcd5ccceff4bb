//! Monte Carlo studies of the estimators.

pub mod kang_schafer;
pub mod mc;
pub mod metrics;
pub mod resample;
pub mod studies;

pub use kang_schafer::{generate_kang_schafer, KangSchaferConfig, ScenarioReplicate};
pub use mc::{
    run_mc_study, run_replicate, CalibrationTarget, EstimatorKind, GridEntry, KangSchaferScenario,
    OutcomeModel, Scenario,
};
pub use metrics::{McMetrics, McTable, ReplicateOutcome};
pub use resample::{resampling_study, MissingnessModel, ResamplingScenario};
pub use studies::{run_nested_models_study, Study};
