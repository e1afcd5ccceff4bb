//! Propensity and working outcome-regression models.
//!
//! Every design matrix here carries the intercept in column 0. Solvers work on
//! internally standardized columns and map coefficients back.

use serde::Serialize;

use crate::data::ObservedSample;
use crate::error::{Error, Result};
use crate::formula::{FeatureMap, FormulaSpec, Response};
use crate::numeric::{maximize_concave, norm2, Cholesky, ConcaveObjective, Matrix, NewtonOptions};

/// Fitted probabilities may come no closer than this to 0 or 1.
pub const PROBABILITY_MARGIN: f64 = 1e-10;

/// Logistic predictors beyond this magnitude push π within the margin.
fn max_linear_predictor() -> f64 {
    ((1.0 - PROBABILITY_MARGIN) / PROBABILITY_MARGIN).ln()
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// ∂π/∂β of a logistic model at fitted probability `pi` and features `f`.
pub fn logistic_gradient(pi: f64, f: &[f64]) -> Vec<f64> {
    let s = pi * (1.0 - pi);
    f.iter().map(|v| s * v).collect()
}

/// Column centering and scaling applied to all but the intercept column.
struct Standardizer {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn new(design: &Matrix, weights: &[f64], labels: &[String]) -> Result<Self> {
        let p = design.cols();
        let wsum: f64 = weights.iter().sum();
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for j in 1..p {
            let mut m = 0.0;
            for (row, w) in design.row_iter().zip(weights) {
                m += w * row[j];
            }
            m /= wsum;
            let mut v = 0.0;
            for (row, w) in design.row_iter().zip(weights) {
                v += w * (row[j] - m).powi(2);
            }
            let sd = (v / wsum).sqrt();
            if !(sd > 1e-12 * m.abs()) {
                return Err(Error::RankDeficient(format!(
                    "column '{}' is constant on the fitting rows",
                    labels.get(j).map_or("?", String::as_str)
                )));
            }
            center[j] = m;
            scale[j] = sd;
        }
        Ok(Self { center, scale })
    }

    fn apply(&self, design: &Matrix) -> Matrix {
        Matrix::from_fn(design.rows(), design.cols(), |i, j| {
            if j == 0 {
                design[(i, 0)]
            } else {
                (design[(i, j)] - self.center[j]) / self.scale[j]
            }
        })
    }

    /// Coefficients on the original columns from standardized ones.
    fn unscale(&self, b: &[f64]) -> Vec<f64> {
        let mut beta = b.to_vec();
        for j in 1..b.len() {
            beta[j] = b[j] / self.scale[j];
            beta[0] -= beta[j] * self.center[j];
        }
        beta
    }
}

fn rank_check(gram: &Matrix, labels: &[String]) -> Result<Cholesky> {
    Cholesky::new(gram).map_err(|e| match e {
        Error::NotPositiveDefinite { column, .. } => Error::RankDeficient(format!(
            "design column '{}' is linearly dependent on earlier columns",
            labels.get(column).map_or("?", String::as_str)
        )),
        other => other,
    })
}

fn weighted_gram(design: &Matrix, weights: &[f64]) -> Matrix {
    let p = design.cols();
    let mut g = Matrix::zeros(p, p);
    for (row, &w) in design.row_iter().zip(weights) {
        if w != 0.0 {
            g.rank_one_update(w, row);
        }
    }
    g
}

fn weighted_cross(design: &Matrix, weights: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; design.cols()];
    for ((row, &w), &yi) in design.row_iter().zip(weights).zip(y) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * yi * v;
        }
    }
    out
}

/// Weighted least squares of `y` on `design`, with one refinement step.
pub fn weighted_least_squares(
    design: &Matrix,
    y: &[f64],
    weights: &[f64],
    labels: &[String],
) -> Result<Vec<f64>> {
    if design.rows() != y.len() || y.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "least squares with {} rows, {} responses and {} weights",
            design.rows(),
            y.len(),
            weights.len()
        )));
    }
    if design.rows() < design.cols() {
        return Err(Error::TooFewCompleteCases {
            needed: design.cols(),
            have: design.rows(),
        });
    }
    let st = Standardizer::new(design, weights, labels)?;
    let z = st.apply(design);
    let chol = rank_check(&weighted_gram(&z, weights), labels)?;
    let mut b = chol.solve(&weighted_cross(&z, weights, y))?;
    let resid: Vec<f64> = z
        .row_iter()
        .zip(y)
        .map(|(row, yi)| yi - crate::numeric::dot(row, &b))
        .collect();
    let correction = chol.solve(&weighted_cross(&z, weights, &resid))?;
    for (bj, cj) in b.iter_mut().zip(&correction) {
        *bj += cj;
    }
    Ok(st.unscale(&b))
}

/// Mean Bernoulli log-likelihood on a standardized design, less
/// `penalty`/2 times the squared norm of the non-intercept coefficients.
struct LogisticLikelihood<'a> {
    design: &'a Matrix,
    y: &'a [f64],
    n: f64,
    penalty: f64,
}

impl LogisticLikelihood<'_> {
    fn eta(&self, b: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let b = b.to_vec();
        self.design.row_iter().map(move |row| crate::numeric::dot(row, &b))
    }
}

impl ConcaveObjective for LogisticLikelihood<'_> {
    fn dim(&self) -> usize {
        self.design.cols()
    }

    fn value(&self, b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (eta, y) in self.eta(b).zip(self.y) {
            // log(1 + e^eta) without overflow
            let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
            s += y * eta - softplus;
        }
        s / self.n - 0.5 * self.penalty * b[1..].iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, b: &[f64]) -> Vec<f64> {
        self.evaluate(b).1
    }

    fn hessian(&self, b: &[f64]) -> Matrix {
        self.evaluate(b).2
    }

    fn evaluate(&self, b: &[f64]) -> (f64, Vec<f64>, Matrix) {
        let p = self.dim();
        let mut f = 0.0;
        let mut g = vec![0.0; p];
        let mut h = Matrix::zeros(p, p);
        for ((row, eta), y) in self.design.row_iter().zip(self.eta(b)).zip(self.y) {
            let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
            f += y * eta - softplus;
            let pi = logistic(eta);
            for (gj, v) in g.iter_mut().zip(row) {
                *gj += (y - pi) * v;
            }
            h.rank_one_update(-pi * (1.0 - pi), row);
        }
        g.iter_mut().for_each(|v| *v /= self.n);
        h.scale(1.0 / self.n);
        let mut f = f / self.n;
        for j in 1..p {
            f -= 0.5 * self.penalty * b[j] * b[j];
            g[j] -= self.penalty * b[j];
            h[(j, j)] -= self.penalty;
        }
        (f, g, h)
    }
}

/// Maximum-likelihood logistic regression; returns (β, fitted probabilities).
/// Fitted probabilities are kept at least [`PROBABILITY_MARGIN`] away from
/// 0 and 1.
pub fn fit_logistic(design: &Matrix, y: &[f64], labels: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    fit_logistic_with(design, y, labels, Some(max_linear_predictor()), 0.0)
}

/// Logistic fit with an optional cap on every |linear predictor| and a ridge
/// penalty on the standardized slopes. Without the cap and penalty only
/// divergence of the fit signals separation.
fn fit_logistic_with(
    design: &Matrix,
    y: &[f64],
    labels: &[String],
    eta_cap: Option<f64>,
    penalty: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if design.rows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "logistic fit with {} rows and {} responses",
            design.rows(),
            y.len()
        )));
    }
    let ones = vec![1.0; y.len()];
    let st = Standardizer::new(design, &ones, labels)?;
    let z = st.apply(design);
    rank_check(&weighted_gram(&z, &ones), labels)?;
    let objective = LogisticLikelihood {
        design: &z,
        y,
        n: y.len() as f64,
        penalty,
    };
    let bound = eta_cap.unwrap_or(f64::INFINITY);
    let feasible = |b: &[f64]| objective.eta(b).all(|e| e.abs() < bound);
    let opts = NewtonOptions::default().with_tol(1e-12).with_max_iter(200);
    let report = match maximize_concave(&objective, &vec![0.0; z.cols()], Some(&feasible), &opts) {
        Ok(r) => r,
        Err(Error::LineSearchStalled(_) | Error::MaxIterations(_) | Error::NotPositiveDefinite { .. }) => {
            return Err(Error::Separation)
        }
        Err(e) => return Err(e),
    };
    let beta = st.unscale(&report.argmax);
    let pi: Vec<f64> = design
        .row_iter()
        .map(|row| logistic(crate::numeric::dot(row, &beta)))
        .collect();
    // Under separation the score can vanish numerically while every
    // probability sits at 0 or 1; the information then collapses.
    let information: f64 = pi.iter().map(|p| p * (1.0 - p)).sum();
    if penalty == 0.0 && information < 1e-6 * y.len() as f64 {
        return Err(Error::Separation);
    }
    Ok((beta, pi))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    pub beta: Vec<f64>,
    /// Fitted π(xᵢ; β̂) for every unit.
    pub pi: Vec<f64>,
    /// Euclidean norm of the mean score at β̂.
    pub score_norm: f64,
    pub design_columns: Vec<String>,
    #[serde(skip)]
    design: Option<Matrix>,
}

impl PropensityFit {
    /// Known response probabilities with no fitted model behind them.
    pub fn known(pi: Vec<f64>) -> Result<Self> {
        if pi.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::InvalidInput("probabilities must lie in (0, 1]".into()));
        }
        Ok(Self {
            beta: Vec::new(),
            pi,
            score_norm: 0.0,
            design_columns: Vec::new(),
            design: None,
        })
    }

    pub fn n(&self) -> usize {
        self.pi.len()
    }

    pub fn design(&self) -> Option<&Matrix> {
        self.design.as_ref()
    }

    /// ∂π(xᵢ; β)/∂β at β̂, or None for known probabilities.
    pub fn gradient(&self, i: usize) -> Option<Vec<f64>> {
        self.design
            .as_ref()
            .map(|d| logistic_gradient(self.pi[i], d.row(i)))
    }

    /// Inverse probabilities 1/πᵢ.
    pub fn inverse_weights(&self) -> Vec<f64> {
        self.pi.iter().map(|p| 1.0 / p).collect()
    }
}

/// Logistic propensity fit, or known probabilities of one when every
/// response is observed (the maximum-likelihood fit does not exist then).
pub fn fit_propensity(sample: &ObservedSample, features: &FeatureMap) -> Result<PropensityFit> {
    if sample.n_complete() == sample.n() {
        return PropensityFit::known(vec![1.0; sample.n()]);
    }
    fit_logistic_propensity(sample, features)
}

pub fn fit_logistic_propensity(sample: &ObservedSample, features: &FeatureMap) -> Result<PropensityFit> {
    let design = features.design(sample.x(), sample.column_names())?;
    let labels = features.labels();
    let r = sample.r_as_f64();
    let (beta, pi) = fit_logistic(&design, &r, &labels)?;
    let n = r.len() as f64;
    let mut score = vec![0.0; design.cols()];
    for ((row, ri), p) in design.row_iter().zip(&r).zip(&pi) {
        for (s, v) in score.iter_mut().zip(row) {
            *s += (ri - p) * v / n;
        }
    }
    Ok(PropensityFit {
        beta,
        pi,
        score_norm: norm2(&score),
        design_columns: labels,
        design: Some(design),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WorkingKind {
    LeastSquares,
    Logistic { threshold: f64 },
}

/// A fitted working model with predictions for every unit.
#[derive(Debug, Clone, Serialize)]
pub struct WorkingModel {
    pub label: String,
    pub kind: WorkingKind,
    pub features: FeatureMap,
    pub coefficients: Vec<f64>,
    pub predictions: Vec<f64>,
}

fn complete_case_design(sample: &ObservedSample, features: &FeatureMap) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let full = features.design(sample.x(), sample.column_names())?;
    let idx = sample.complete_indices();
    if idx.len() < full.cols() {
        return Err(Error::TooFewCompleteCases {
            needed: full.cols(),
            have: idx.len(),
        });
    }
    let y = idx.iter().map(|&i| sample.y()[i].unwrap_or(f64::NAN)).collect();
    let cc = full.select_rows(&idx);
    Ok((full, cc, y))
}

/// Complete-case least squares of y on the features.
pub fn fit_working_ols(sample: &ObservedSample, features: &FeatureMap) -> Result<WorkingModel> {
    let (full, cc, y) = complete_case_design(sample, features)?;
    let w = vec![1.0; y.len()];
    let coefficients = weighted_least_squares(&cc, &y, &w, &features.labels())?;
    let predictions = full.mul_vec(&coefficients)?;
    Ok(WorkingModel {
        label: format!("y ~ {features}"),
        kind: WorkingKind::LeastSquares,
        features: features.clone(),
        coefficients,
        predictions,
    })
}

/// Ridge penalty on the standardized slopes of a separated working logistic
/// fit.
pub const SEPARATED_WORKING_PENALTY: f64 = 1e-4;

/// Complete-case logistic regression of I(y > threshold) on the features.
pub fn fit_working_logistic(
    sample: &ObservedSample,
    features: &FeatureMap,
    threshold: f64,
) -> Result<WorkingModel> {
    let (full, cc, y) = complete_case_design(sample, features)?;
    let z: Vec<f64> = y.iter().map(|v| if *v > threshold { 1.0 } else { 0.0 }).collect();
    let labels = features.labels();
    // Extreme fitted probabilities are harmless in a working model. When the
    // classes are separable the maximum-likelihood fit does not exist, and a
    // slightly penalized fit stands in for the limiting step function.
    let constant = z.iter().all(|&v| v == z[0]);
    let (coefficients, _) = match fit_logistic_with(&cc, &z, &labels, None, 0.0) {
        Err(Error::Separation) if !constant => fit_logistic_with(&cc, &z, &labels, None, SEPARATED_WORKING_PENALTY)?,
        other => other?,
    };
    let predictions = full
        .row_iter()
        .map(|row| logistic(crate::numeric::dot(row, &coefficients)))
        .collect();
    Ok(WorkingModel {
        label: format!("I(y>{threshold}) ~ {features}"),
        kind: WorkingKind::Logistic { threshold },
        features: features.clone(),
        coefficients,
        predictions,
    })
}

/// Fits a working model from a formula: least squares for a plain response,
/// logistic regression for an exceedance indicator `I(y > c)`.
pub fn fit_working(sample: &ObservedSample, formula: &FormulaSpec) -> Result<WorkingModel> {
    formula.bind(sample.column_names())?;
    let mut model = match &formula.response {
        Response::Column(name) if name == "y" => fit_working_ols(sample, &formula.features)?,
        Response::Indicator {
            name,
            cmp: crate::formula::Comparison::Gt,
            threshold,
        } if name == "y" => fit_working_logistic(sample, &formula.features, *threshold)?,
        other => {
            return Err(Error::InvalidInput(format!(
                "working-model response must be y or I(y>c), got {other}"
            )))
        }
    };
    model.label = formula.to_string();
    Ok(model)
}

/// The q working models whose predictions are calibrated to.
#[derive(Debug, Clone, Serialize)]
pub struct WorkingModelSet {
    pub models: Vec<WorkingModel>,
    /// N × q matrix of predictions u(xᵢ; γ̂).
    #[serde(skip)]
    pub predictions: Matrix,
}

impl WorkingModelSet {
    pub fn new(models: Vec<WorkingModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidInput("at least one working model is required".into()));
        }
        let n = models[0].predictions.len();
        if models.iter().any(|m| m.predictions.len() != n) {
            return Err(Error::DimensionMismatch("working models predict different unit counts".into()));
        }
        let cols: Vec<&[f64]> = models.iter().map(|m| m.predictions.as_slice()).collect();
        let predictions = Matrix::from_columns(&cols)?;
        check_collinearity(&predictions, &models.iter().map(|m| m.label.clone()).collect::<Vec<_>>())?;
        Ok(Self { models, predictions })
    }

    pub fn q(&self) -> usize {
        self.models.len()
    }
}

/// Fails when prediction columns are constant or linearly dependent.
pub fn check_collinearity(u: &Matrix, labels: &[String]) -> Result<()> {
    let n = u.rows() as f64;
    let q = u.cols();
    let means: Vec<f64> = (0..q).map(|j| u.column(j).iter().sum::<f64>() / n).collect();
    let mut sd = vec![0.0; q];
    for row in u.row_iter() {
        for j in 0..q {
            sd[j] += (row[j] - means[j]).powi(2);
        }
    }
    for (j, s) in sd.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12 * means[j].abs()) {
            return Err(Error::RankDeficient(format!(
                "working model '{}' has constant predictions",
                labels[j]
            )));
        }
    }
    let mut gram = Matrix::zeros(q, q);
    let mut z = vec![0.0; q];
    for row in u.row_iter() {
        for j in 0..q {
            z[j] = (row[j] - means[j]) / sd[j];
        }
        gram.rank_one_update(1.0 / n, &z);
    }
    Cholesky::new(&gram).map(|_| ()).map_err(|e| match e {
        Error::NotPositiveDefinite { column, .. } => Error::RankDeficient(format!(
            "working model '{}' is collinear with earlier models",
            labels[column]
        )),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlpWeighting {
    /// Complete cases weighted by 1/π̂.
    #[default]
    InverseProbability,
    /// Plain complete-case least squares.
    Unweighted,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestLinearPredictorFit {
    /// Intercept followed by one slope per working model.
    pub c: Vec<f64>,
    /// c₀ + Σ cⱼ uⱼ(xᵢ) for every unit.
    pub m_hat: Vec<f64>,
}

/// Best linear predictor of y by the working predictions.
pub fn fit_best_linear_predictor(
    sample: &ObservedSample,
    u: &Matrix,
    propensity: &PropensityFit,
    weighting: BlpWeighting,
) -> Result<BestLinearPredictorFit> {
    if u.rows() != sample.n() || propensity.n() != sample.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} units, {} prediction rows, {} propensities",
            sample.n(),
            u.rows(),
            propensity.n()
        )));
    }
    let idx = sample.complete_indices();
    let q = u.cols();
    if idx.len() < q + 1 {
        return Err(Error::TooFewCompleteCases {
            needed: q + 1,
            have: idx.len(),
        });
    }
    let design = Matrix::from_fn(sample.n(), q + 1, |i, j| if j == 0 { 1.0 } else { u[(i, j - 1)] });
    let cc = design.select_rows(&idx);
    let y: Vec<f64> = idx.iter().map(|&i| sample.y()[i].unwrap_or(f64::NAN)).collect();
    let w: Vec<f64> = idx
        .iter()
        .map(|&i| match weighting {
            BlpWeighting::InverseProbability => 1.0 / propensity.pi[i],
            BlpWeighting::Unweighted => 1.0,
        })
        .collect();
    let labels: Vec<String> = std::iter::once("(intercept)".to_string())
        .chain((1..=q).map(|j| format!("u{j}")))
        .collect();
    let c = weighted_least_squares(&cc, &y, &w, &labels)?;
    let m_hat = design.mul_vec(&c)?;
    Ok(BestLinearPredictorFit { c, m_hat })
}
