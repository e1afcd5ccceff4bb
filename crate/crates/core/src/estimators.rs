//! Point estimators of E(h(Y)) from a sample with missing responses.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationResult;
use crate::data::ObservedSample;
use crate::error::{Error, Result};
use crate::fit::PropensityFit;
use crate::inference::wald_ci;
use crate::numeric::{norm_inf, solve_general, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub method: String,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_complete: usize,
    pub warnings: Vec<String>,
}

impl Estimate {
    pub fn point(method: impl Into<String>, value: f64, n_complete: usize) -> Self {
        Self {
            value,
            method: method.into(),
            se: None,
            ci_lo: None,
            ci_hi: None,
            n_complete,
            warnings: Vec::new(),
        }
    }

    /// Attaches a standard error and the matching Wald interval.
    pub fn with_se(mut self, se: f64, level: f64) -> Result<Self> {
        let (lo, hi) = wald_ci(self.value, se, level)?;
        self.se = Some(se);
        self.ci_lo = Some(lo);
        self.ci_hi = Some(hi);
        Ok(self)
    }

    pub fn covers(&self, truth: f64) -> Option<bool> {
        Some(self.ci_lo? <= truth && truth <= self.ci_hi?)
    }
}

/// A scalar function of the response with a display name.
#[derive(Clone)]
pub struct ResponseFunction {
    pub name: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl ResponseFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    #[inline]
    pub fn apply(&self, y: f64) -> f64 {
        (self.f)(y)
    }
}

impl fmt::Debug for ResponseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ResponseFunction({})", self.name)
    }
}

/// A functional of the response distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimandSpec {
    Mean,
    /// P(Y > threshold).
    TailProbability { threshold: f64 },
}

impl EstimandSpec {
    pub fn h(&self) -> ResponseFunction {
        match self {
            EstimandSpec::Mean => ResponseFunction::new("mean", |y| y),
            EstimandSpec::TailProbability { threshold } => {
                let c = *threshold;
                ResponseFunction::new(format!("P(y>{c})"), move |y| if y > c { 1.0 } else { 0.0 })
            }
        }
    }

    pub fn label(&self) -> String {
        self.h().name
    }
}

impl FromStr for EstimandSpec {
    type Err = Error;

    /// `mean` or `P(y>c)`.
    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact == "mean" {
            return Ok(EstimandSpec::Mean);
        }
        compact
            .strip_prefix("P(y>")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(|c| c.parse::<f64>().ok())
            .filter(|c| c.is_finite())
            .map(|threshold| EstimandSpec::TailProbability { threshold })
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimand {s:?}; expected mean or P(y>c)")))
    }
}

fn check_len(sample: &ObservedSample, propensity: &PropensityFit) -> Result<()> {
    if propensity.n() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} propensities for {} units",
            propensity.n(),
            sample.n()
        )));
    }
    Ok(())
}

/// N⁻¹ Σ rᵢ yᵢ / πᵢ.
pub fn estimate_ipw(sample: &ObservedSample, propensity: &PropensityFit) -> Result<Estimate> {
    estimate_ipw_of(sample, propensity, &EstimandSpec::Mean.h())
}

pub fn estimate_ipw_of(
    sample: &ObservedSample,
    propensity: &PropensityFit,
    h: &ResponseFunction,
) -> Result<Estimate> {
    check_len(sample, propensity)?;
    let total: f64 = sample
        .complete_indices()
        .into_iter()
        .map(|i| h.apply(sample.y()[i].unwrap_or(f64::NAN)) / propensity.pi[i])
        .sum();
    Ok(Estimate::point("ipw", total / sample.n() as f64, sample.n_complete()))
}

/// Σ rᵢ yᵢ / πᵢ divided by Σ rᵢ / πᵢ.
pub fn estimate_hajek(sample: &ObservedSample, propensity: &PropensityFit) -> Result<Estimate> {
    check_len(sample, propensity)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in sample.complete_indices() {
        num += sample.y()[i].unwrap_or(f64::NAN) / propensity.pi[i];
        den += 1.0 / propensity.pi[i];
    }
    Ok(Estimate::point("hajek", num / den, sample.n_complete()))
}

/// N⁻¹ Σ rᵢ yᵢ / πᵢ − N⁻¹ Σ (rᵢ − πᵢ) m̂ᵢ / πᵢ.
pub fn estimate_aipw(sample: &ObservedSample, propensity: &PropensityFit, m_hat: &[f64]) -> Result<Estimate> {
    estimate_aipw_of(sample, propensity, m_hat, &EstimandSpec::Mean.h())
}

pub fn estimate_aipw_of(
    sample: &ObservedSample,
    propensity: &PropensityFit,
    m_hat: &[f64],
    h: &ResponseFunction,
) -> Result<Estimate> {
    check_len(sample, propensity)?;
    if m_hat.len() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} units",
            m_hat.len(),
            sample.n()
        )));
    }
    let mut total = 0.0;
    for i in 0..sample.n() {
        let pi = propensity.pi[i];
        let r = if sample.r()[i] { 1.0 } else { 0.0 };
        if let Some(y) = sample.y()[i] {
            total += h.apply(y) / pi;
        }
        total -= (r - pi) / pi * m_hat[i];
    }
    Ok(Estimate::point("aipw", total / sample.n() as f64, sample.n_complete()))
}

/// Mean of the predictions over all units.
pub fn estimate_ols(m_hat: &[f64], n_complete: usize) -> Result<Estimate> {
    if m_hat.is_empty() {
        return Err(Error::InvalidInput("no predictions".into()));
    }
    Ok(Estimate::point(
        "ols",
        m_hat.iter().sum::<f64>() / m_hat.len() as f64,
        n_complete,
    ))
}

/// Σ rᵢ pᵢ yᵢ with calibration weights.
pub fn estimate_cal(sample: &ObservedSample, calibration: &CalibrationResult) -> Result<Estimate> {
    estimate_cal_of(sample, calibration, &EstimandSpec::Mean.h())
}

pub fn estimate_cal_of(
    sample: &ObservedSample,
    calibration: &CalibrationResult,
    h: &ResponseFunction,
) -> Result<Estimate> {
    if calibration.weights.len() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} units",
            calibration.weights.len(),
            sample.n()
        )));
    }
    let mut est = Estimate::point(
        "cal",
        calibration.weighted_sum(sample.y(), |y| h.apply(y)),
        sample.n_complete(),
    );
    est.warnings.extend(calibration.warnings.iter().cloned());
    Ok(est)
}

/// Applies one weight vector to every estimand.
pub fn multipurpose_estimate(
    sample: &ObservedSample,
    calibration: &CalibrationResult,
    estimands: &[EstimandSpec],
) -> Result<Vec<Estimate>> {
    estimands
        .iter()
        .map(|e| {
            let h = e.h();
            let mut est = estimate_cal_of(sample, calibration, &h)?;
            est.method = format!("cal:{}", h.name);
            Ok(est)
        })
        .collect()
}

/// Strictly increasing cutpoints; the outer intervals extend to ±∞.
pub fn validate_cutpoints(cutpoints: &[f64]) -> Result<()> {
    if cutpoints.is_empty() {
        return Err(Error::InvalidInput("at least one cutpoint is required".into()));
    }
    if cutpoints.iter().any(|c| !c.is_finite()) || cutpoints.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("cutpoints must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Indicator functions I(t_{m} < y ≤ t_{m+1}) of the M+1 intervals cut by
/// `cutpoints`, whose working models form the calibration set for
/// [`functional_grid_approx`].
pub fn interval_indicators(cutpoints: &[f64]) -> Result<Vec<ResponseFunction>> {
    validate_cutpoints(cutpoints)?;
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend_from_slice(cutpoints);
    edges.push(f64::INFINITY);
    Ok(edges
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            ResponseFunction::new(format!("({a}, {b}]"), move |y| if y > a && y <= b { 1.0 } else { 0.0 })
        })
        .collect())
}

/// Σₘ h(sₘ) [F(t_{m+1}) − F(t_m)] with F increments estimated by the
/// calibration weights.
///
/// sₘ is the interval midpoint for interior intervals and the single finite
/// endpoint for the two unbounded outer intervals.
pub fn functional_grid_approx(
    sample: &ObservedSample,
    h: &ResponseFunction,
    cutpoints: &[f64],
    calibration: &CalibrationResult,
) -> Result<Estimate> {
    let indicators = interval_indicators(cutpoints)?;
    let k = cutpoints.len();
    let mut value = 0.0;
    let mut warnings = Vec::new();
    for (m, ind) in indicators.iter().enumerate() {
        let point = match m {
            0 => cutpoints[0],
            m if m == k => cutpoints[k - 1],
            m => 0.5 * (cutpoints[m - 1] + cutpoints[m]),
        };
        let mass = calibration.weighted_sum(sample.y(), |y| ind.apply(y));
        if mass == 0.0 {
            warnings.push(format!("EmptyInterval: {} has no weighted mass", ind.name));
        }
        value += h.apply(point) * mass;
    }
    let mut est = Estimate::point(format!("cal-grid:{}", h.name), value, sample.n_complete());
    est.warnings = warnings;
    Ok(est)
}

/// A just-identified estimating function g(y, x; θ) with its Jacobian in θ.
pub trait EstimatingFunction {
    fn dim(&self) -> usize;
    fn value(&self, y: f64, x: &[f64], theta: &[f64]) -> Vec<f64>;
    /// ∂g/∂θ as a dim × dim matrix.
    fn jacobian(&self, y: f64, x: &[f64], theta: &[f64]) -> Matrix;
}

/// Newton root of Σ rᵢ pᵢ g(yᵢ, xᵢ; θ) = 0. Point estimates only.
pub fn solve_estimating_equation<G: EstimatingFunction + ?Sized>(
    sample: &ObservedSample,
    calibration: &CalibrationResult,
    g: &G,
    theta0: &[f64],
) -> Result<Vec<Estimate>> {
    let k = g.dim();
    if theta0.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "start of length {} for {k} equations",
            theta0.len()
        )));
    }
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 100;
    let mut theta = theta0.to_vec();
    let eval = |theta: &[f64]| -> (Vec<f64>, Matrix) {
        let mut sum = vec![0.0; k];
        let mut jac = Matrix::zeros(k, k);
        for &i in &calibration.complete {
            let p = calibration.weights[i];
            let y = sample.y()[i].unwrap_or(f64::NAN);
            let x = sample.x().row(i);
            for (s, v) in sum.iter_mut().zip(g.value(y, x, theta)) {
                *s += p * v;
            }
            let j = g.jacobian(y, x, theta);
            for a in 0..k {
                for b in 0..k {
                    jac[(a, b)] += p * j[(a, b)];
                }
            }
        }
        (sum, jac)
    };
    for _ in 0..MAX_ITER {
        let (value, jac) = eval(&theta);
        if norm_inf(&value) <= TOL {
            return Ok(theta
                .iter()
                .enumerate()
                .map(|(j, t)| Estimate::point(format!("cal-ee:{j}"), *t, sample.n_complete()))
                .collect());
        }
        let step = solve_general(&jac, &value).map_err(|e| match e {
            Error::Singular { .. } => Error::SingularJacobian,
            other => other,
        })?;
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
    }
    let (value, _) = eval(&theta);
    Err(Error::MaxIterations(Box::new(crate::numeric::NewtonReport {
        argmax: theta,
        objective_value: f64::NAN,
        iterations: MAX_ITER,
        gradient_norm: norm_inf(&value),
        converged: false,
        trace: Vec::new(),
    })))
}
