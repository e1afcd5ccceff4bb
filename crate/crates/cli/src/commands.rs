//! The workflows behind each subcommand.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::Path;

use gelcal_core::data::read_full_csv;
use gelcal_core::estimators::{estimate_aipw_of, estimate_cal_of, estimate_ipw_of};
use gelcal_core::fit::WorkingKind;
use gelcal_core::simulation::resample::{resampling_grid, resampling_study, synthetic_expenditure};
use gelcal_core::{
    calibration_variance, estimate_hajek, estimate_ols, fit_propensity, fit_working, load_csv,
    parse_formula, solve_lambda, weight_diagnostics, CalibrationProblem,
    EstimandSpec, Estimate, FeasibilityBox, McTable, ObservedSample, WorkingModel, WorkingModelSet,
};
use serde::Serialize;

use crate::config::{Estimator, RunConfig, Validated};
use crate::error::CliError;

/// Comment lines written at the top of every output file.
pub fn provenance(config: &RunConfig) -> Vec<String> {
    let workflow = config.workflow.map_or("-", |w| w.name());
    vec![
        format!("gelcal {}", env!("CARGO_PKG_VERSION")),
        format!("workflow {workflow}"),
        format!("seed {}", config.seed),
        format!("config-sha256 {}", config.hash()),
    ]
}

/// One line of the estimate report.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRow {
    pub estimator: String,
    pub estimand: String,
    pub value: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_complete: usize,
    pub warnings: String,
}

impl EstimateRow {
    fn new(estimator: &str, estimand: &EstimandSpec, est: Estimate) -> Self {
        Self {
            estimator: estimator.into(),
            estimand: estimand.label(),
            value: est.value,
            se: est.se,
            ci_lo: est.ci_lo,
            ci_hi: est.ci_hi,
            n_complete: est.n_complete,
            warnings: est.warnings.join("; "),
        }
    }
}

pub struct EstimateReport {
    pub rows: Vec<EstimateRow>,
    /// Fit and weight diagnostics for the header.
    pub notes: Vec<String>,
}

/// The working model fitted for `estimand`: least squares for the mean, a
/// logistic fit at the same threshold for an exceedance probability.
fn model_for<'a>(models: &'a [WorkingModel], estimand: &EstimandSpec) -> Option<&'a WorkingModel> {
    models.iter().find(|m| match (estimand, m.kind) {
        (EstimandSpec::Mean, WorkingKind::LeastSquares) => true,
        (EstimandSpec::TailProbability { threshold }, WorkingKind::Logistic { threshold: t }) => *threshold == t,
        _ => false,
    })
}

pub fn estimate(config: &RunConfig, v: &Validated) -> Result<EstimateReport, CliError> {
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| CliError::usage("estimate needs an input file"))?;
    let propensity_formula = v
        .propensity
        .as_ref()
        .ok_or_else(|| CliError::usage("estimate needs a propensity formula"))?;
    let sample = load_csv(input, &config.missing_token)?;
    estimate_sample(&sample, config, v, propensity_formula)
}

fn estimate_sample(
    sample: &ObservedSample,
    config: &RunConfig,
    v: &Validated,
    propensity_formula: &gelcal_core::FormulaSpec,
) -> Result<EstimateReport, CliError> {
    propensity_formula.bind(sample.column_names())?;
    let propensity = fit_propensity(sample, &propensity_formula.features)?;
    let models = v
        .working_models
        .iter()
        .map(|f| fit_working(sample, f))
        .collect::<Result<Vec<_>, _>>()?;
    let mut notes = vec![
        format!("units {}, complete cases {}", sample.n(), sample.n_complete()),
        format!("propensity {propensity_formula}, score norm {:.3e}", propensity.score_norm),
    ];

    let calibration = if v.estimators.contains(&Estimator::Cal) {
        if models.is_empty() {
            return Err(CliError::usage("cal needs at least one working model"));
        }
        let set = WorkingModelSet::new(models.clone())?;
        let problem = CalibrationProblem::new(set.predictions, sample.r().to_vec(), &propensity.pi, v.rho.clone())?;
        let bounds = config.feasibility_box.then(FeasibilityBox::default);
        let result = solve_lambda(&problem, bounds.as_ref())?;
        let d = weight_diagnostics(&result);
        notes.push(format!(
            "calibration {} box {}: lambda {:?}, restricted {}",
            v.rho,
            if config.feasibility_box { "on" } else { "off" },
            result.lambda_hat,
            result.restricted
        ));
        notes.push(format!(
            "weights: min {:.4e}, max {:.4e}, negative {}, effective size {:.1}, max moment residual {:.2e}",
            d.min_weight, d.max_weight, d.negative_weights, d.effective_sample_size, d.max_abs_moment_residual
        ));
        Some((problem, result))
    } else {
        None
    };

    let mut rows = Vec::new();
    for estimand in &v.estimands {
        let h = estimand.h();
        for est in &v.estimators {
            let row = match est {
                Estimator::Ipw => EstimateRow::new(est.name(), estimand, estimate_ipw_of(sample, &propensity, &h)?),
                Estimator::Hajek => {
                    let mapped = sample.map_y(|y| h.apply(y))?;
                    EstimateRow::new(est.name(), estimand, estimate_hajek(&mapped, &propensity)?)
                }
                Estimator::Aipw | Estimator::Ols => {
                    let Some(m) = model_for(&models, estimand) else {
                        notes.push(format!("{} skipped for {}: no working model for it", est.name(), estimand.label()));
                        continue;
                    };
                    if *est == Estimator::Aipw {
                        EstimateRow::new(est.name(), estimand, estimate_aipw_of(sample, &propensity, &m.predictions, &h)?)
                    } else {
                        EstimateRow::new(est.name(), estimand, estimate_ols(&m.predictions, sample.n_complete())?)
                    }
                }
                Estimator::Cal => {
                    let (problem, result) = calibration.as_ref().expect("calibration solved");
                    let mut point = estimate_cal_of(sample, result, &h)?;
                    match calibration_variance(sample, &propensity, problem.u(), &h, point.value) {
                        Ok(var) if var.variance.is_finite() => {
                            let se = var.se();
                            point.warnings.extend(var.warnings);
                            point = point.with_se(se, config.level)?;
                        }
                        Ok(_) => point.warnings.push("variance is not finite".into()),
                        Err(e) => point.warnings.push(format!("no standard error: {e}")),
                    }
                    EstimateRow::new(&format!("cal:{}", v.rho), estimand, point)
                }
            };
            rows.push(row);
        }
    }
    Ok(EstimateReport { rows, notes })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn estimate_csv(report: &EstimateReport, header: &[String]) -> Result<String, CliError> {
    let mut out = String::new();
    for line in header.iter().chain(&report.notes) {
        let _ = writeln!(out, "# {line}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::data("Csv", e.to_string());
    w.write_record(["estimator", "estimand", "value", "se", "ci_lo", "ci_hi", "n_complete", "warnings"])
        .map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.estimator.clone(),
            r.estimand.clone(),
            r.value.to_string(),
            opt(r.se),
            opt(r.ci_lo),
            opt(r.ci_hi),
            r.n_complete.to_string(),
            r.warnings.clone(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data("Io", e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is UTF-8"));
    Ok(out)
}

pub fn estimate_markdown(report: &EstimateReport, header: &[String], level: f64) -> String {
    let mut out = String::from("<!--\n");
    for line in header.iter().chain(&report.notes) {
        let _ = writeln!(out, "{line}");
    }
    out.push_str("-->\n\n");
    let ci = format!("{:.0}% CI", 100.0 * level);
    let _ = writeln!(out, "| estimator | estimand | estimate | SE | {ci} | complete |");
    out.push_str("|---|---|---:|---:|---|---:|\n");
    for r in &report.rows {
        let se = r.se.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
        let interval = match (r.ci_lo, r.ci_hi) {
            (Some(lo), Some(hi)) => format!("({lo:.4}, {hi:.4})"),
            _ => "-".into(),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {se} | {interval} | {} |",
            r.estimator, r.estimand, r.value, r.n_complete
        );
    }
    out
}

pub fn simulate(config: &RunConfig, v: &Validated) -> Result<McTable, CliError> {
    Ok(v.study
        .run(config.simulation.n, config.reps, config.seed, config.parallelism)?)
}

pub fn resample(config: &RunConfig, v: &Validated) -> Result<McTable, CliError> {
    let full = match &config.input {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::data("Io", format!("{}: {e}", path.display())))?;
            read_full_csv(file)?
        }
        None => synthetic_expenditure(config.resample.synthetic_n, config.seed)?,
    };
    let grid = resampling_grid(
        &v.missingness.features,
        &v.misspecified.features,
        &v.outcome.features,
        config.resample.threshold,
    );
    Ok(resampling_study(&full, &v.missingness, &grid, config.reps, config.seed, config.parallelism)?)
}

/// Writes `csv` to `path` and `markdown` next to it with an `.md` extension.
pub fn write_outputs(path: &Path, csv: &str, markdown: &str) -> Result<(), CliError> {
    fs::write(path, csv).map_err(|e| CliError::data("Io", format!("{}: {e}", path.display())))?;
    let md = path.with_extension("md");
    fs::write(&md, markdown).map_err(|e| CliError::data("Io", format!("{}: {e}", md.display())))?;
    Ok(())
}

pub fn table_csv(table: &McTable, header: &[String]) -> Result<String, CliError> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf, header)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// Parsed structure of a formula, optionally checked against column names.
pub fn formula_check(text: &str, columns: Option<&[String]>) -> Result<String, CliError> {
    let spec = parse_formula(text)?;
    if let Some(cols) = columns {
        spec.bind(cols)?;
    }
    let mut out = String::new();
    let _ = writeln!(out, "formula  {spec}");
    let _ = writeln!(out, "response {}", spec.response);
    for label in spec.features.labels() {
        let _ = writeln!(out, "column   {label}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gelcal_core::Matrix;

    fn config(estimators: &[&str]) -> RunConfig {
        RunConfig {
            propensity: Some("r ~ x".into()),
            working_models: vec!["y ~ x".into()],
            estimands: vec!["mean".into(), "P(y>2)".into()],
            estimators: estimators.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn full_data_calibration_is_sample_mean() {
        let y = [1.0, 2.5, 4.0, 3.0, 0.5];
        let x = Matrix::from_fn(5, 1, |i, _| (i * i) as f64);
        let s = ObservedSample::new(y.iter().map(|v| Some(*v)).collect(), vec![true; 5], x, vec!["x".into()]).unwrap();
        let c = config(&["cal", "ipw"]);
        let v = c.validate().unwrap();
        let report = estimate_sample(&s, &c, &v, v.propensity.as_ref().unwrap()).unwrap();
        let mean = y.iter().sum::<f64>() / 5.0;
        for r in report.rows.iter().filter(|r| r.estimand == "mean") {
            assert!((r.value - mean).abs() < 1e-12, "{}: {}", r.estimator, r.value);
        }
        let tail = report.rows.iter().find(|r| r.estimand == "P(y>2)" && r.estimator == "ipw").unwrap();
        assert!((tail.value - 0.6).abs() < 1e-12);
    }

    #[test]
    fn missing_tail_model_skips_aipw() {
        let n = 40;
        let x = Matrix::from_fn(n, 1, |i, _| i as f64 / 10.0);
        let y: Vec<Option<f64>> = (0..n).map(|i| (i % 3 != 0).then(|| i as f64 / 10.0 + 1.0)).collect();
        let r = y.iter().map(Option::is_some).collect();
        let s = ObservedSample::new(y, r, x, vec!["x".into()]).unwrap();
        let c = config(&["aipw", "cal"]);
        let v = c.validate().unwrap();
        let report = estimate_sample(&s, &c, &v, v.propensity.as_ref().unwrap()).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.notes.iter().any(|n| n.contains("aipw skipped for P(y>2)")));
        let cal = report.rows.iter().find(|r| r.estimator == "cal:quadratic" && r.estimand == "mean").unwrap();
        assert!(cal.se.unwrap() > 0.0);
        let csv = estimate_csv(&report, &["h".into()]).unwrap();
        assert!(csv.starts_with("# h\n"));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }

    #[test]
    fn formula_check_lists_columns() {
        let out = formula_check("I(y>240) ~ x1 + sqrt(x2)", None).unwrap();
        assert!(out.contains("response I(y>240)"));
        assert!(out.contains("column   sqrt(x2)"));
        let cols = vec!["x1".to_string()];
        assert_eq!(formula_check("y ~ x1 + x3", Some(&cols)).unwrap_err().error, "UnknownColumn");
    }
}
