//! Calibration weights from the GEL criterion.
//!
//! The complete-case weights take the form pᵢ ∝ πᵢ⁻¹ ρ'(λᵀ(uᵢ − ū)), with λ
//! chosen so the weighted complete-case means of u reproduce the full-sample
//! means ū.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{
    dot, maximize_concave, norm_inf, solve_spd, Cholesky, ConcaveObjective, Matrix, NewtonOptions,
    NewtonReport,
};
use crate::rho::RhoFunction;

/// Open interval that every v = λᵀ(uᵢ − ū) must stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct FeasibilityBox {
    pub v_lo: f64,
    pub v_hi: f64,
}

impl Default for FeasibilityBox {
    fn default() -> Self {
        Self {
            v_lo: -0.9,
            v_hi: 0.9,
        }
    }
}

impl FeasibilityBox {
    pub fn new(v_lo: f64, v_hi: f64) -> Result<Self> {
        if !(v_lo < 0.0 && 0.0 < v_hi) || !v_lo.is_finite() || !v_hi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "feasibility interval ({v_lo}, {v_hi}) must contain zero"
            )));
        }
        Ok(Self { v_lo, v_hi })
    }

    #[inline]
    pub fn contains(&self, v: f64) -> bool {
        v > self.v_lo && v < self.v_hi
    }

    /// Checks that ρ' stays strictly negative on the closed interval, so every
    /// weight inside the box is positive.
    pub fn validate_for(&self, rho: &RhoFunction) -> Result<()> {
        let (lo, hi) = rho.domain();
        if !(self.v_lo > lo && self.v_hi < hi) {
            return Err(Error::InvalidInput(format!(
                "feasibility interval ({}, {}) leaves the domain of {rho}",
                self.v_lo, self.v_hi
            )));
        }
        // ρ' is decreasing, so its largest value sits at the left end.
        if !(rho.eval_unchecked(self.v_lo, 1) < 0.0) {
            return Err(Error::InvalidInput(format!(
                "{rho} has a non-negative derivative at {}",
                self.v_lo
            )));
        }
        Ok(())
    }
}

/// Calibration functions, response pattern and base weights for one sample.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    u: Matrix,
    u_bar: Vec<f64>,
    r: Vec<bool>,
    base_weights: Vec<f64>,
    rho: RhoFunction,
}

impl CalibrationProblem {
    /// `pi` holds the fitted response probabilities of all N units.
    pub fn new(u: Matrix, r: Vec<bool>, pi: &[f64], rho: RhoFunction) -> Result<Self> {
        let n = u.rows();
        if r.len() != n || pi.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} rows of u, {} indicators, {} probabilities",
                r.len(),
                pi.len()
            )));
        }
        if u.cols() == 0 {
            return Err(Error::InvalidInput("no calibration functions".into()));
        }
        if pi.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::InvalidInput("probabilities must lie in (0, 1]".into()));
        }
        let mut u_bar = vec![0.0; u.cols()];
        for row in u.row_iter() {
            for (m, v) in u_bar.iter_mut().zip(row) {
                *m += v;
            }
        }
        u_bar.iter_mut().for_each(|m| *m /= n as f64);
        let base_weights = pi.iter().map(|p| 1.0 / p).collect();
        Ok(Self {
            u,
            u_bar,
            r,
            base_weights,
            rho,
        })
    }

    pub fn n(&self) -> usize {
        self.u.rows()
    }

    pub fn q(&self) -> usize {
        self.u.cols()
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn u_bar(&self) -> &[f64] {
        &self.u_bar
    }

    pub fn r(&self) -> &[bool] {
        &self.r
    }

    /// 1/πᵢ for every unit.
    pub fn base_weights(&self) -> &[f64] {
        &self.base_weights
    }

    pub fn rho(&self) -> &RhoFunction {
        &self.rho
    }

    pub fn with_rho(&self, rho: RhoFunction) -> Self {
        Self {
            rho,
            ..self.clone()
        }
    }

    pub fn complete_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.r[i]).collect()
    }

    /// ū − Σ rᵢ pᵢ uᵢ for weights indexed by unit.
    pub fn moment_residual(&self, weights: &[f64]) -> Vec<f64> {
        let mut res = self.u_bar.clone();
        for (i, row) in self.u.row_iter().enumerate() {
            if self.r[i] {
                for (m, v) in res.iter_mut().zip(row) {
                    *m -= weights[i] * v;
                }
            }
        }
        res
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationResult {
    pub lambda_hat: Vec<f64>,
    /// Weight of every unit; zero where the response is missing.
    pub weights: Vec<f64>,
    pub complete: Vec<usize>,
    pub moment_residual: Vec<f64>,
    /// Whether the feasibility box stopped the solver short of the unrestricted
    /// optimum.
    pub restricted: bool,
    pub newton: NewtonReport,
    pub warnings: Vec<String>,
}

impl CalibrationResult {
    pub fn converged(&self) -> bool {
        self.newton.converged
    }

    /// Σ rᵢ pᵢ h(yᵢ) over complete cases, with `y` indexed by unit.
    pub fn weighted_sum(&self, y: &[Option<f64>], h: impl Fn(f64) -> f64) -> f64 {
        self.complete
            .iter()
            .map(|&i| self.weights[i] * h(y[i].unwrap_or(f64::NAN)))
            .sum()
    }
}

/// ρ-weighted criterion W⁻¹ Σ wᵢ ρ(ηᵀzᵢ) over the rows of `z`.
struct GelObjective<'a> {
    z: &'a Matrix,
    w: &'a [f64],
    wsum: f64,
    rho: &'a RhoFunction,
}

impl GelObjective<'_> {
    fn v(&self, eta: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let eta = eta.to_vec();
        self.z.row_iter().map(move |row| dot(row, &eta))
    }
}

impl ConcaveObjective for GelObjective<'_> {
    fn dim(&self) -> usize {
        self.z.cols()
    }

    fn value(&self, eta: &[f64]) -> f64 {
        let mut f = 0.0;
        for (v, w) in self.v(eta).zip(self.w) {
            if !self.rho.in_domain(v) {
                return f64::NEG_INFINITY;
            }
            f += w * self.rho.eval_unchecked(v, 0);
        }
        f / self.wsum
    }

    fn gradient(&self, eta: &[f64]) -> Vec<f64> {
        self.evaluate(eta).1
    }

    fn hessian(&self, eta: &[f64]) -> Matrix {
        self.evaluate(eta).2
    }

    fn evaluate(&self, eta: &[f64]) -> (f64, Vec<f64>, Matrix) {
        let q = self.dim();
        let mut f = 0.0;
        let mut g = vec![0.0; q];
        let mut h = Matrix::zeros(q, q);
        for ((row, v), w) in self.z.row_iter().zip(self.v(eta)).zip(self.w) {
            let (r0, r1, r2) = self.rho.eval012(v);
            f += w * r0;
            for (gj, zj) in g.iter_mut().zip(row) {
                *gj += w * r1 * zj;
            }
            h.rank_one_update(w * r2, row);
        }
        g.iter_mut().for_each(|v| *v /= self.wsum);
        h.scale(1.0 / self.wsum);
        (f / self.wsum, g, h)
    }
}

/// Gradient-norm tolerance of the solver in standardized coordinates.
const SOLVER_TOL: f64 = 1e-12;

/// Centered, column-standardized rows of u for the given units.
fn standardized(u: &Matrix, u_bar: &[f64], rows: &[usize]) -> (Matrix, Vec<f64>) {
    let q = u.cols();
    let k = rows.len() as f64;
    let mut scale = vec![0.0; q];
    let mut mean = vec![0.0; q];
    for &i in rows {
        for j in 0..q {
            mean[j] += u[(i, j)] / k;
        }
    }
    for &i in rows {
        for j in 0..q {
            scale[j] += (u[(i, j)] - mean[j]).powi(2) / k;
        }
    }
    for (s, m) in scale.iter_mut().zip(&mean) {
        let sd = s.sqrt();
        *s = if sd > 1e-12 * m.abs() { sd } else { m.abs().max(1.0) };
    }
    let z = Matrix::from_fn(rows.len(), q, |a, j| (u[(rows[a], j)] - u_bar[j]) / scale[j]);
    (z, scale)
}

fn gram_check(z: &Matrix, w: &[f64]) -> Result<()> {
    let mut g = Matrix::zeros(z.cols(), z.cols());
    for (row, &wi) in z.row_iter().zip(w) {
        g.rank_one_update(wi, row);
    }
    Cholesky::new(&g).map(|_| ())
}

fn check_complete(problem: &CalibrationProblem, complete: &[usize]) -> Result<()> {
    if complete.len() < problem.q() + 1 {
        return Err(Error::TooFewCompleteCases {
            needed: problem.q() + 1,
            have: complete.len(),
        });
    }
    Ok(())
}

/// Maximizes Σ rᵢ πᵢ⁻¹ ρ(λᵀ(uᵢ − ū)) from λ = 0 and forms the weights.
///
/// With a box, trial steps that move any complete-case v outside it are
/// rejected. When the box keeps the solver from reaching a stationary point,
/// the best point found is returned with `restricted` set and a non-zero
/// moment residual.
pub fn solve_lambda(problem: &CalibrationProblem, bounds: Option<&FeasibilityBox>) -> Result<CalibrationResult> {
    solve_lambda_with(problem, bounds, &NewtonOptions::default())
}

pub fn solve_lambda_with(
    problem: &CalibrationProblem,
    bounds: Option<&FeasibilityBox>,
    options: &NewtonOptions,
) -> Result<CalibrationResult> {
    if let Some(keep) = non_constant_columns(problem) {
        return on_reduced(problem, &keep, |p| solve_lambda_with(p, bounds, options));
    }
    if let Some(b) = bounds {
        b.validate_for(problem.rho())?;
    }
    let complete = problem.complete_indices();
    check_complete(problem, &complete)?;
    let (z, scale) = standardized(&problem.u, &problem.u_bar, &complete);
    let w: Vec<f64> = complete.iter().map(|&i| problem.base_weights[i]).collect();
    gram_check(&z, &w)?;
    let objective = GelObjective {
        z: &z,
        w: &w,
        wsum: w.iter().sum(),
        rho: &problem.rho,
    };
    let feasible = |eta: &[f64]| {
        objective
            .v(eta)
            .all(|v| problem.rho.in_domain(v) && bounds.is_none_or(|b| b.contains(v)))
    };
    let opts = options.with_tol(options.tol.min(SOLVER_TOL));
    let (report, restricted) = match maximize_concave(&objective, &vec![0.0; z.cols()], Some(&feasible), &opts) {
        Ok(rep) => (rep, false),
        Err(Error::LineSearchStalled(rep) | Error::MaxIterations(rep)) => (*rep, true),
        Err(e) => return Err(e),
    };
    let weights = weights_from(&objective, &report.argmax, &complete, problem.n());
    let moment_residual = problem.moment_residual(&weights);
    // The criterion can flatten out at infinity when ū lies outside the reach
    // of the weights; a vanishing gradient there is not a solution.
    let restricted = restricted || !balanced(&moment_residual, &scale);
    if restricted && bounds.is_none() {
        return Err(Error::InfeasibleCalibration {
            residual: norm_inf(&moment_residual),
            iterations: report.iterations,
        });
    }
    let lambda_hat: Vec<f64> = report.argmax.iter().zip(&scale).map(|(e, s)| e / s).collect();
    let mut warnings = Vec::new();
    if restricted {
        warnings.push(format!(
            "feasibility box is binding; moment residual {:.3e}",
            norm_inf(&moment_residual)
        ));
    }
    Ok(CalibrationResult {
        lambda_hat,
        weights,
        complete,
        moment_residual,
        restricted,
        newton: report,
        warnings,
    })
}

/// Indices of the non-constant columns of u, or None when all vary.
///
/// A column constant across all units already satisfies its moment condition
/// through Σ rᵢpᵢ = 1, so it is left out of the optimization with λⱼ = 0.
fn non_constant_columns(problem: &CalibrationProblem) -> Option<Vec<usize>> {
    let keep: Vec<usize> = (0..problem.q())
        .filter(|&j| {
            let c = problem.u_bar[j];
            problem.u.row_iter().any(|row| (row[j] - c).abs() > 1e-12 * c.abs().max(1e-300))
        })
        .collect();
    (keep.len() < problem.q()).then_some(keep)
}

/// Solves on the kept columns and expands λ back with zeros.
fn on_reduced(
    problem: &CalibrationProblem,
    keep: &[usize],
    solve: impl Fn(&CalibrationProblem) -> Result<CalibrationResult>,
) -> Result<CalibrationResult> {
    let mut result = if keep.is_empty() {
        let complete = problem.complete_indices();
        let total: f64 = complete.iter().map(|&i| problem.base_weights[i]).sum();
        let mut weights = vec![0.0; problem.n()];
        for &i in &complete {
            weights[i] = problem.base_weights[i] / total;
        }
        CalibrationResult {
            lambda_hat: Vec::new(),
            weights,
            complete,
            moment_residual: Vec::new(),
            restricted: false,
            newton: NewtonReport {
                argmax: Vec::new(),
                objective_value: 0.0,
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
                trace: Vec::new(),
            },
            warnings: Vec::new(),
        }
    } else {
        let u = Matrix::from_fn(problem.n(), keep.len(), |i, j| problem.u[(i, keep[j])]);
        let reduced = CalibrationProblem {
            u,
            u_bar: keep.iter().map(|&j| problem.u_bar[j]).collect(),
            ..problem.clone()
        };
        solve(&reduced)?
    };
    let mut lambda = vec![0.0; problem.q()];
    for (k, &j) in keep.iter().enumerate() {
        lambda[j] = result.lambda_hat[k];
    }
    result.lambda_hat = lambda;
    result.moment_residual = problem.moment_residual(&result.weights);
    Ok(result)
}

/// Whether every moment residual is negligible next to its column's spread.
fn balanced(residual: &[f64], scale: &[f64]) -> bool {
    residual.iter().zip(scale).all(|(r, s)| r.abs() <= 1e-6 * s)
}

/// pᵢ = wᵢ ρ'(vᵢ) / Σⱼ wⱼ ρ'(vⱼ) on complete cases.
fn weights_from(objective: &GelObjective<'_>, eta: &[f64], complete: &[usize], n: usize) -> Vec<f64> {
    let raw: Vec<f64> = objective
        .v(eta)
        .zip(objective.w)
        .map(|(v, w)| w * objective.rho.eval_unchecked(v, 1))
        .collect();
    let total: f64 = raw.iter().sum();
    let mut weights = vec![0.0; n];
    for (&i, p) in complete.iter().zip(&raw) {
        weights[i] = p / total;
    }
    weights
}

/// Explicit solution for the quadratic criterion:
/// λ̂ = −[Σ rᵢπᵢ⁻¹ dᵢdᵢᵀ]⁻¹ Σ rᵢπᵢ⁻¹ dᵢ with dᵢ = uᵢ − ū.
pub fn solve_lambda_quadratic_closed_form(problem: &CalibrationProblem) -> Result<CalibrationResult> {
    if problem.rho != RhoFunction::Quadratic {
        return Err(Error::InvalidInput(format!(
            "closed form requires the quadratic criterion, got {}",
            problem.rho
        )));
    }
    if let Some(keep) = non_constant_columns(problem) {
        return on_reduced(problem, &keep, solve_lambda_quadratic_closed_form);
    }
    let complete = problem.complete_indices();
    check_complete(problem, &complete)?;
    let (z, scale) = standardized(&problem.u, &problem.u_bar, &complete);
    let w: Vec<f64> = complete.iter().map(|&i| problem.base_weights[i]).collect();
    let wsum: f64 = w.iter().sum();
    let q = z.cols();
    let mut gram = Matrix::zeros(q, q);
    let mut s = vec![0.0; q];
    for (row, &wi) in z.row_iter().zip(&w) {
        gram.rank_one_update(wi / wsum, row);
        for (sj, zj) in s.iter_mut().zip(row) {
            *sj += wi * zj / wsum;
        }
    }
    let eta: Vec<f64> = solve_spd(&gram, &s)?.into_iter().map(|v| -v).collect();
    let objective = GelObjective {
        z: &z,
        w: &w,
        wsum,
        rho: &problem.rho,
    };
    let (f, g, _) = objective.evaluate(&eta);
    let weights = weights_from(&objective, &eta, &complete, problem.n());
    let moment_residual = problem.moment_residual(&weights);
    Ok(CalibrationResult {
        lambda_hat: eta.iter().zip(&scale).map(|(e, s)| e / s).collect(),
        weights,
        complete,
        moment_residual,
        restricted: false,
        newton: NewtonReport {
            gradient_norm: crate::numeric::norm2(&g),
            argmax: eta,
            objective_value: f,
            iterations: 0,
            converged: true,
            trace: vec![f],
        },
        warnings: Vec::new(),
    })
}

/// Index of a column of u that is constant across all units.
fn constant_column(u: &Matrix) -> Option<usize> {
    (0..u.cols()).find(|&j| {
        let first = u[(0, j)];
        first != 0.0 && u.row_iter().all(|row| (row[j] - first).abs() <= 1e-12 * first.abs())
    })
}

/// Centered variant: λ maximizes N⁻¹ Σᵢ ρ(λᵀgᵢ) over all units with
/// gᵢ = rᵢπᵢ⁻¹uᵢ − ū, and pᵢ* = πᵢ⁻¹ρ'(λᵀgᵢ) / Σⱼ ρ'(λᵀgⱼ) for complete cases.
///
/// The first-order condition makes Σ rᵢpᵢ*uᵢ = ū exact; through the constant
/// column of u it also gives Σ rᵢpᵢ* = 1.
pub fn solve_centered(problem: &CalibrationProblem, bounds: Option<&FeasibilityBox>) -> Result<CalibrationResult> {
    if constant_column(&problem.u).is_none() {
        return Err(Error::MissingConstantColumn);
    }
    if let Some(b) = bounds {
        b.validate_for(problem.rho())?;
    }
    let complete = problem.complete_indices();
    check_complete(problem, &complete)?;
    let n = problem.n();
    let q = problem.q();
    let g = Matrix::from_fn(n, q, |i, j| {
        let ri = if problem.r[i] { problem.base_weights[i] } else { 0.0 };
        ri * problem.u[(i, j)] - problem.u_bar[j]
    });
    let all: Vec<usize> = (0..n).collect();
    let zero = vec![0.0; q];
    let (z, scale) = standardized(&g, &zero, &all);
    let ones = vec![1.0; n];
    let objective = GelObjective {
        z: &z,
        w: &ones,
        wsum: n as f64,
        rho: &problem.rho,
    };
    let feasible = |eta: &[f64]| {
        objective
            .v(eta)
            .all(|v| problem.rho.in_domain(v) && bounds.is_none_or(|b| b.contains(v)))
    };
    let opts = NewtonOptions::default().with_tol(SOLVER_TOL);
    let (report, restricted) = match maximize_concave(&objective, &zero, Some(&feasible), &opts) {
        Ok(rep) => (rep, false),
        Err(Error::LineSearchStalled(rep) | Error::MaxIterations(rep)) => (*rep, true),
        Err(e) => return Err(e),
    };
    let rho1: Vec<f64> = objective.v(&report.argmax).map(|v| problem.rho.eval_unchecked(v, 1)).collect();
    let total: f64 = rho1.iter().sum();
    let mut weights = vec![0.0; n];
    for &i in &complete {
        weights[i] = problem.base_weights[i] * rho1[i] / total;
    }
    let moment_residual = problem.moment_residual(&weights);
    let u_scale = standardized(&problem.u, &problem.u_bar, &all).1;
    let restricted = restricted || !balanced(&moment_residual, &u_scale);
    if restricted && bounds.is_none() {
        return Err(Error::InfeasibleCalibration {
            residual: norm_inf(&moment_residual),
            iterations: report.iterations,
        });
    }
    let mut warnings = Vec::new();
    let mass: f64 = complete.iter().map(|&i| weights[i]).sum();
    if (mass - 1.0).abs() > 1e-6 {
        warnings.push(format!("centered weights sum to {mass}"));
    }
    if restricted {
        warnings.push(format!(
            "feasibility box is binding; moment residual {:.3e}",
            norm_inf(&moment_residual)
        ));
    }
    Ok(CalibrationResult {
        lambda_hat: report.argmax.iter().zip(&scale).map(|(e, s)| e / s).collect(),
        weights,
        complete,
        moment_residual,
        restricted,
        newton: report,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightDiagnostics {
    pub min_weight: f64,
    pub max_weight: f64,
    pub negative_weights: usize,
    /// (Σp)² / Σp² over complete cases.
    pub effective_sample_size: f64,
    pub max_abs_moment_residual: f64,
}

pub fn weight_diagnostics(result: &CalibrationResult) -> WeightDiagnostics {
    let p: Vec<f64> = result.complete.iter().map(|&i| result.weights[i]).collect();
    let sum: f64 = p.iter().sum();
    let sq: f64 = p.iter().map(|v| v * v).sum();
    WeightDiagnostics {
        min_weight: p.iter().copied().fold(f64::INFINITY, f64::min),
        max_weight: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        negative_weights: p.iter().filter(|v| **v < 0.0).count(),
        effective_sample_size: sum * sum / sq,
        max_abs_moment_residual: norm_inf(&result.moment_residual),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A random problem with n units and q calibration functions.
    fn random_problem(seed: u64, n: usize, q: usize, rho: RhoFunction) -> CalibrationProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = Matrix::from_fn(n, q, |i, j| (x[i] * (j + 1) as f64).sin() + 0.3 * rng.random_range(-1.0..1.0));
        let pi: Vec<f64> = x.iter().map(|v| 1.0 / (1.0 + (-0.4 - 0.8 * v).exp())).collect();
        let mut r: Vec<bool> = pi.iter().map(|p| rng.random::<f64>() < *p).collect();
        for flag in r.iter_mut().take(q + 2) {
            *flag = true;
        }
        CalibrationProblem::new(u, r, &pi, rho).unwrap()
    }

    fn assert_calibrated(p: &CalibrationProblem, res: &CalibrationResult) {
        let mass: f64 = res.complete.iter().map(|&i| res.weights[i]).sum();
        assert!((mass - 1.0).abs() <= 1e-10, "mass {mass}");
        assert!(norm_inf(&p.moment_residual(&res.weights)) <= 1e-8);
    }

    #[test]
    fn balanced_problem_has_zero_lambda() {
        // complete cases {0, 1} with weights 2 and 2 have mean u = 1 = ū
        let u = Matrix::from_rows(&[[0.0], [2.0], [1.0], [1.0]]).unwrap();
        let r = vec![true, true, false, false];
        let pi = [0.5; 4];
        for rho in [RhoFunction::Quadratic, RhoFunction::EmpiricalLikelihood, RhoFunction::ExponentialTilting] {
            let p = CalibrationProblem::new(u.clone(), r.clone(), &pi, rho).unwrap();
            let res = solve_lambda(&p, Some(&FeasibilityBox::default())).unwrap();
            assert_eq!(res.lambda_hat, vec![0.0]);
            assert_eq!(res.weights, vec![0.5, 0.5, 0.0, 0.0]);
            let cf = solve_lambda_quadratic_closed_form(&p.with_rho(RhoFunction::Quadratic)).unwrap();
            assert_eq!(cf.lambda_hat, vec![0.0]);
        }
    }

    #[test]
    fn no_missingness_gives_uniform_weights() {
        let u = Matrix::from_rows(&[[0.3, 1.0], [1.2, -0.5], [2.0, 0.7], [-0.4, 0.1], [0.9, 2.2]]).unwrap();
        let p = CalibrationProblem::new(u, vec![true; 5], &[1.0; 5], RhoFunction::EmpiricalLikelihood).unwrap();
        let res = solve_lambda(&p, None).unwrap();
        assert!(res.lambda_hat.iter().all(|v| v.abs() < 1e-14));
        assert!(res.weights.iter().all(|w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn fixed_point_weights_identical_across_rho() {
        // weights 2, 2, 1.25 give complete-case mean 1 = ū
        let u = Matrix::from_rows(&[[0.0], [2.0], [1.0], [1.0]]).unwrap();
        let r = vec![true, true, true, false];
        let pi = [0.5, 0.5, 0.8, 0.5];
        let mut first: Option<Vec<f64>> = None;
        for rho in [
            RhoFunction::Quadratic,
            RhoFunction::EmpiricalLikelihood,
            RhoFunction::ExponentialTilting,
            RhoFunction::PowerDivergence(2.0 / 3.0),
        ] {
            let p = CalibrationProblem::new(u.clone(), r.clone(), &pi, rho).unwrap();
            let res = solve_lambda(&p, None).unwrap();
            assert_eq!(res.lambda_hat, vec![0.0]);
            match &first {
                None => first = Some(res.weights),
                Some(w) => assert_eq!(w, &res.weights),
            }
        }
    }

    #[test]
    fn closed_form_matches_newton() {
        for seed in 0..100 {
            let q = 1 + (seed as usize % 4);
            let p = random_problem(seed, 10 + 3 * seed as usize % 50, q, RhoFunction::Quadratic);
            let cf = solve_lambda_quadratic_closed_form(&p).unwrap();
            let nw = solve_lambda(&p, None).unwrap();
            for (a, b) in cf.lambda_hat.iter().zip(&nw.lambda_hat) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "seed {seed}: {a} vs {b}");
            }
            for (a, b) in cf.weights.iter().zip(&nw.weights) {
                assert!((a - b).abs() <= 1e-8);
            }
            assert_calibrated(&p, &cf);
            assert_calibrated(&p, &nw);
        }
    }

    /// Criterion of the original problem in λ, evaluated directly.
    fn criterion(p: &CalibrationProblem, lambda: &[f64]) -> f64 {
        let mut f = 0.0;
        for i in p.complete_indices() {
            let v: f64 = (0..p.q()).map(|j| lambda[j] * (p.u()[(i, j)] - p.u_bar()[j])).sum();
            if !p.rho().in_domain(v) {
                return f64::NEG_INFINITY;
            }
            f += p.base_weights()[i] * p.rho().eval_unchecked(v, 0);
        }
        f
    }

    fn grid_argmax_1d(p: &CalibrationProblem, lo: f64, hi: f64, step: f64) -> f64 {
        let steps = ((hi - lo) / step).round() as usize;
        (0..=steps)
            .map(|k| lo + k as f64 * step)
            .max_by(|a, b| criterion(p, &[*a]).total_cmp(&criterion(p, &[*b])))
            .unwrap()
    }

    #[test]
    fn el_matches_grid_search() {
        for seed in 0..5 {
            let p = random_problem(100 + seed, 10, 1, RhoFunction::EmpiricalLikelihood);
            let res = solve_lambda(&p, None).unwrap();
            let coarse = grid_argmax_1d(&p, -20.0, 20.0, 1e-3);
            let fine = grid_argmax_1d(&p, coarse - 2e-3, coarse + 2e-3, 1e-6);
            assert!((fine - res.lambda_hat[0]).abs() <= 1e-5, "{fine} vs {:?}", res.lambda_hat);
        }
    }

    #[test]
    fn centered_no_missingness() {
        let u = Matrix::from_rows(&[[1.0, 0.3], [1.0, 1.2], [1.0, 2.0], [1.0, -0.4]]).unwrap();
        let p = CalibrationProblem::new(u, vec![true; 4], &[1.0; 4], RhoFunction::ExponentialTilting).unwrap();
        let res = solve_centered(&p, None).unwrap();
        assert!(res.lambda_hat.iter().all(|v| v.abs() < 1e-12));
        assert!(res.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn centered_requires_constant_column() {
        let p = random_problem(3, 20, 2, RhoFunction::ExponentialTilting);
        assert!(matches!(solve_centered(&p, None), Err(Error::MissingConstantColumn)));
    }

    fn with_constant(p: &CalibrationProblem, pi: &[f64]) -> CalibrationProblem {
        let u = Matrix::from_fn(p.n(), p.q() + 1, |i, j| if j == 0 { 1.0 } else { p.u()[(i, j - 1)] });
        CalibrationProblem::new(u, p.r().to_vec(), pi, p.rho().clone()).unwrap()
    }

    #[test]
    fn centered_moments_and_grid() {
        let mut infeasible = 0;
        for seed in 0..20 {
            let base = random_problem(200 + seed, 10, 1, RhoFunction::ExponentialTilting);
            let pi: Vec<f64> = base.base_weights().iter().map(|w| 1.0 / w).collect();
            let p = with_constant(&base, &pi);
            let res = match solve_centered(&p, None) {
                Ok(res) => res,
                Err(Error::InfeasibleCalibration { .. }) => {
                    infeasible += 1;
                    continue;
                }
                Err(e) => panic!("{e}"),
            };
            assert!(norm_inf(&res.moment_residual) <= 1e-8);
            let mass: f64 = res.complete.iter().map(|&i| res.weights[i]).sum();
            assert!((mass - 1.0).abs() <= 1e-8);
            assert!(res.warnings.is_empty());
            if seed < 3 {
                // coarse-to-fine 2-d grid over N⁻¹ Σ ρ(λᵀgᵢ)
                let g: Vec<[f64; 2]> = (0..p.n())
                    .map(|i| {
                        let ri = if p.r()[i] { p.base_weights()[i] } else { 0.0 };
                        [ri - 1.0, ri * p.u()[(i, 1)] - p.u_bar()[1]]
                    })
                    .collect();
                let f = |l: [f64; 2]| -> f64 { g.iter().map(|gi| -(l[0] * gi[0] + l[1] * gi[1]).exp()).sum() };
                let mut best = [0.0, 0.0];
                let mut half = 8.0;
                for _ in 0..40 {
                    let step = half / 10.0;
                    let c = best;
                    for a in -10..=10 {
                        for b in -10..=10 {
                            let t = [c[0] + a as f64 * step, c[1] + b as f64 * step];
                            if f(t) > f(best) {
                                best = t;
                            }
                        }
                    }
                    half = step * 2.0;
                }
                for (a, b) in best.iter().zip(&res.lambda_hat) {
                    assert!((a - b).abs() <= 1e-4, "{best:?} vs {:?}", res.lambda_hat);
                }
            }
        }
        assert!(infeasible <= 5, "{infeasible} infeasible instances");
    }

    #[test]
    fn diagnostics_examples() {
        let uniform = CalibrationResult {
            lambda_hat: vec![0.0],
            weights: vec![0.25; 4],
            complete: vec![0, 1, 2, 3],
            moment_residual: vec![0.0],
            restricted: false,
            newton: NewtonReport {
                argmax: vec![0.0],
                objective_value: 0.0,
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
                trace: vec![],
            },
            warnings: vec![],
        };
        assert_eq!(weight_diagnostics(&uniform).effective_sample_size, 4.0);
        let single = CalibrationResult {
            weights: vec![1.0, 0.0, 0.0, 0.0],
            ..uniform
        };
        let d = weight_diagnostics(&single);
        assert_eq!(d.effective_sample_size, 1.0);
        assert_eq!(d.negative_weights, 0);
    }

    #[test]
    fn et_weights_never_negative() {
        for seed in 0..200 {
            let p = random_problem(1000 + seed, 15 + seed as usize % 30, 1 + seed as usize % 3, RhoFunction::ExponentialTilting);
            if let Ok(res) = solve_lambda(&p, None) {
                assert_eq!(weight_diagnostics(&res).negative_weights, 0);
                assert_calibrated(&p, &res);
            }
        }
    }

    #[test]
    fn box_keeps_el_weights_positive() {
        for seed in 0..100 {
            let p = random_problem(5000 + seed, 12, 2, RhoFunction::EmpiricalLikelihood);
            let b = FeasibilityBox::default();
            let res = solve_lambda(&p, Some(&b)).unwrap();
            for &i in &res.complete {
                let v: f64 = (0..2).map(|j| res.lambda_hat[j] * (p.u()[(i, j)] - p.u_bar()[j])).sum();
                assert!(v < 1.0 && v > b.v_lo - 1e-12 && v < b.v_hi + 1e-12);
                assert!(res.weights[i] >= 0.0);
            }
            if !res.restricted {
                assert_calibrated(&p, &res);
            }
        }
    }

    #[test]
    fn hull_violation_is_infeasible_without_box() {
        // every complete case has u below ū, so no positive weights can match it
        let u = Matrix::from_rows(&[[0.0], [0.1], [0.2], [5.0], [6.0]]).unwrap();
        let r = vec![true, true, true, false, false];
        for rho in [RhoFunction::EmpiricalLikelihood, RhoFunction::ExponentialTilting] {
            let p = CalibrationProblem::new(u.clone(), r.clone(), &[0.5; 5], rho).unwrap();
            assert!(matches!(solve_lambda(&p, None), Err(Error::InfeasibleCalibration { .. })));
            let res = solve_lambda(&p, Some(&FeasibilityBox::default())).unwrap();
            assert!(res.restricted);
            assert!(weight_diagnostics(&res).negative_weights == 0);
        }
    }

    #[test]
    fn collinear_functions_rejected() {
        let u = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [0.0, 0.0]]).unwrap();
        let p = CalibrationProblem::new(u, vec![true, true, true, false], &[0.5; 4], RhoFunction::Quadratic).unwrap();
        assert!(matches!(solve_lambda(&p, None), Err(Error::NotPositiveDefinite { .. })));
        assert!(matches!(solve_lambda_quadratic_closed_form(&p), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn box_must_suit_rho() {
        assert!(FeasibilityBox::new(-0.5, 1.5).unwrap().validate_for(&RhoFunction::EmpiricalLikelihood).is_err());
        assert!(FeasibilityBox::new(-1.5, 0.5).unwrap().validate_for(&RhoFunction::Quadratic).is_err());
        assert!(FeasibilityBox::default().validate_for(&RhoFunction::Quadratic).is_ok());
        assert!(FeasibilityBox::new(0.1, 0.5).is_err());
    }
}
