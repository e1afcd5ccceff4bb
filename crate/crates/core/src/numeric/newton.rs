use serde::Serialize;

use super::matrix::{dot, norm2, Cholesky, Matrix};
use crate::error::{Error, Result};

/// A smooth concave objective with analytic first and second derivatives.
pub trait ConcaveObjective {
    fn dim(&self) -> usize;

    /// Objective value. Non-finite values are treated as infeasible.
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    fn hessian(&self, x: &[f64]) -> Matrix;

    /// Value, gradient and Hessian at once; override when they share work.
    fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>, Matrix) {
        (self.value(x), self.gradient(x), self.hessian(x))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Convergence threshold on the Euclidean norm of the gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-increase constant.
    pub armijo: f64,
    /// Smallest step length tried before giving up.
    pub min_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            armijo: 1e-4,
            min_step: 1e-14,
        }
    }
}

impl NewtonOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonReport {
    pub argmax: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Damped Newton ascent with backtracking.
///
/// A trial point is rejected, and the step halved, when it fails the
/// feasibility predicate, yields a non-finite objective, or fails the Armijo
/// condition. Once the predicted increase is below the resolution of the
/// objective value, a step is accepted if it reduces the gradient norm.
pub fn maximize_concave<O: ConcaveObjective + ?Sized>(
    objective: &O,
    start: &[f64],
    feasible: Option<&dyn Fn(&[f64]) -> bool>,
    options: &NewtonOptions,
) -> Result<NewtonReport> {
    if start.len() != objective.dim() {
        return Err(Error::DimensionMismatch(format!(
            "start of length {} for a {}-dimensional objective",
            start.len(),
            objective.dim()
        )));
    }
    let is_feasible = |x: &[f64]| feasible.is_none_or(|f| f(x));
    if !is_feasible(start) {
        return Err(Error::InvalidInput("starting point is infeasible".into()));
    }

    let mut x = start.to_vec();
    let (mut f, mut g, mut h) = objective.evaluate(&x);
    if !f.is_finite() {
        return Err(Error::InvalidInput("objective is not finite at the start".into()));
    }
    let mut trace = vec![f];
    let report = |x: &[f64], f: f64, gn: f64, it: usize, conv: bool, trace: &[f64]| NewtonReport {
        argmax: x.to_vec(),
        objective_value: f,
        iterations: it,
        gradient_norm: gn,
        converged: conv,
        trace: trace.to_vec(),
    };

    for iter in 0..options.max_iter {
        let gn = norm2(&g);
        if gn <= options.tol {
            return Ok(report(&x, f, gn, iter, true, &trace));
        }
        let mut neg_h = h;
        neg_h.scale(-1.0);
        let direction = Cholesky::new(&neg_h)?.solve(&g)?;
        let slope = dot(&g, &direction);
        let resolution = 1e-12 * (1.0 + f.abs());

        let mut step = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(a, d)| a + step * d).collect();
            if is_feasible(&trial) {
                let ft = objective.value(&trial);
                if ft.is_finite() {
                    if ft >= f + options.armijo * step * slope {
                        break Some(trial);
                    }
                    if step * slope <= resolution && ft >= f - resolution {
                        let gt = objective.gradient(&trial);
                        if norm2(&gt) < gn {
                            break Some(trial);
                        }
                    }
                }
            }
            step *= 0.5;
            if step < options.min_step {
                break None;
            }
        };
        let Some(trial) = accepted else {
            return Err(Error::LineSearchStalled(Box::new(report(
                &x, f, gn, iter, false, &trace,
            ))));
        };
        x = trial;
        (f, g, h) = objective.evaluate(&x);
        trace.push(f);
    }

    let gn = norm2(&g);
    if gn <= options.tol {
        return Ok(report(&x, f, gn, options.max_iter, true, &trace));
    }
    Err(Error::MaxIterations(Box::new(report(
        &x,
        f,
        gn,
        options.max_iter,
        false,
        &trace,
    ))))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = -1/2 (x - c)^T A (x - c) with A positive definite.
    struct Quadratic {
        a: Matrix,
        c: Vec<f64>,
    }

    impl ConcaveObjective for Quadratic {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            let d: Vec<f64> = x.iter().zip(&self.c).map(|(a, b)| a - b).collect();
            -0.5 * dot(&d, &self.a.mul_vec(&d).unwrap())
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            let d: Vec<f64> = x.iter().zip(&self.c).map(|(a, b)| a - b).collect();
            self.a.mul_vec(&d).unwrap().into_iter().map(|v| -v).collect()
        }
        fn hessian(&self, _x: &[f64]) -> Matrix {
            let mut h = self.a.clone();
            h.scale(-1.0);
            h
        }
    }

    /// f(v) = log(1 - v) + v on v < 1.
    struct LogBarrier;

    impl ConcaveObjective for LogBarrier {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> f64 {
            if x[0] >= 1.0 {
                f64::NEG_INFINITY
            } else {
                (1.0 - x[0]).ln() + x[0]
            }
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            vec![-1.0 / (1.0 - x[0]) + 1.0]
        }
        fn hessian(&self, x: &[f64]) -> Matrix {
            Matrix::new(1, 1, vec![-1.0 / (1.0 - x[0]).powi(2)]).unwrap()
        }
    }

    #[test]
    fn quadratic_bowl() {
        let obj = Quadratic {
            a: Matrix::identity(2),
            c: vec![0.0, 0.0],
        };
        let rep = maximize_concave(&obj, &[5.0, 5.0], None, &NewtonOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.argmax.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn stationary_start() {
        let feasible = |x: &[f64]| x[0] < 1.0;
        let rep =
            maximize_concave(&LogBarrier, &[0.0], Some(&feasible), &NewtonOptions::default()).unwrap();
        assert_eq!(rep.argmax, vec![0.0]);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn log_barrier_from_the_left() {
        let feasible = |x: &[f64]| x[0] < 1.0;
        let rep = maximize_concave(&LogBarrier, &[-3.0], Some(&feasible), &NewtonOptions::default())
            .unwrap();
        assert!(rep.argmax[0].abs() < 1e-8);
        for w in rep.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn strictly_concave_quadratic_in_two_iterations() {
        let a = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]).unwrap();
        let obj = Quadratic {
            a,
            c: vec![1.0, -2.0, 3.0],
        };
        let opts = NewtonOptions::default().with_tol(1e-10);
        let rep = maximize_concave(&obj, &[10.0, 10.0, -10.0], None, &opts).unwrap();
        assert!(rep.iterations <= 2);
        assert!(rep.gradient_norm <= 1e-10);
    }

    #[test]
    fn infeasible_start_rejected() {
        let feasible = |x: &[f64]| x[0] < 1.0;
        assert!(maximize_concave(&LogBarrier, &[2.0], Some(&feasible), &NewtonOptions::default())
            .is_err());
    }

    #[test]
    fn max_iterations_reports_unconverged() {
        // f(v) = -exp(-v): supremum only at infinity.
        struct Unbounded;
        impl ConcaveObjective for Unbounded {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, x: &[f64]) -> f64 {
                -(-x[0]).exp()
            }
            fn gradient(&self, x: &[f64]) -> Vec<f64> {
                vec![(-x[0]).exp()]
            }
            fn hessian(&self, x: &[f64]) -> Matrix {
                Matrix::new(1, 1, vec![-(-x[0]).exp()]).unwrap()
            }
        }
        let opts = NewtonOptions::default().with_max_iter(5).with_tol(1e-300);
        match maximize_concave(&Unbounded, &[0.0], None, &opts) {
            Err(Error::MaxIterations(rep)) => {
                assert!(!rep.converged);
                assert_eq!(rep.iterations, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_underflow_stalls() {
        let feasible = |x: &[f64]| x[0] <= 0.0;
        let obj = Quadratic {
            a: Matrix::identity(1),
            c: vec![1.0],
        };
        match maximize_concave(&obj, &[0.0], Some(&feasible), &NewtonOptions::default()) {
            Err(Error::LineSearchStalled(rep)) => assert!(!rep.converged),
            other => panic!("unexpected {other:?}"),
        }
    }
}
