//! Concave criterion functions for generalized empirical likelihood weights.
//!
//! Every function exposed here is normalized so that its first and second
//! derivatives at zero both equal -1. Calibration weights are proportional
//! to the first derivative, so the normalization only rescales the dual
//! parameter and never changes the weights themselves.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// An un-normalized concave function given through its derivatives.
pub trait RawRho: Send + Sync {
    /// `order`-th derivative at `v`, for `order` in 0..=3.
    fn derivative(&self, v: f64, order: u8) -> f64;

    /// Open interval on which the function is defined.
    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn name(&self) -> String {
        "custom".to_string()
    }
}

/// Closure-backed raw function on the whole real line.
pub struct FnRho<F>(pub F);

impl<F: Fn(f64, u8) -> f64 + Send + Sync> RawRho for FnRho<F> {
    fn derivative(&self, v: f64, order: u8) -> f64 {
        (self.0)(v, order)
    }
}

/// `b * raw(a v)` with `a = raw'(0) / raw''(0)` and `b = -raw''(0) / raw'(0)^2`.
pub struct NormalizedRho {
    raw: Arc<dyn RawRho>,
    a: f64,
    b: f64,
}

impl NormalizedRho {
    fn derivative(&self, v: f64, order: u8) -> f64 {
        self.b * self.a.powi(order as i32) * self.raw.derivative(self.a * v, order)
    }

    fn domain(&self) -> (f64, f64) {
        let (lo, hi) = self.raw.domain();
        let (l, h) = (lo / self.a, hi / self.a);
        if self.a > 0.0 {
            (l, h)
        } else {
            (h, l)
        }
    }
}

/// A member of the normalized GEL family.
#[derive(Clone)]
pub enum RhoFunction {
    /// `-(v + 1)^2 / 2`
    Quadratic,
    /// `log(1 - v)` on `v < 1`
    EmpiricalLikelihood,
    /// `-exp(v)`
    ExponentialTilting,
    /// `-(1 + theta v)^((theta + 1) / theta) / (theta + 1)` on `1 + theta v > 0`
    PowerDivergence(f64),
    /// An arbitrary raw function passed through [`normalize`].
    Normalized(Arc<NormalizedRho>),
}

impl RhoFunction {
    /// Open interval of valid arguments.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            RhoFunction::Quadratic | RhoFunction::ExponentialTilting => {
                (f64::NEG_INFINITY, f64::INFINITY)
            }
            RhoFunction::EmpiricalLikelihood => (f64::NEG_INFINITY, 1.0),
            RhoFunction::PowerDivergence(theta) => {
                if *theta > 0.0 {
                    (-1.0 / theta, f64::INFINITY)
                } else {
                    (f64::NEG_INFINITY, -1.0 / theta)
                }
            }
            RhoFunction::Normalized(n) => n.domain(),
        }
    }

    #[inline]
    pub fn in_domain(&self, v: f64) -> bool {
        let (lo, hi) = self.domain();
        v > lo && v < hi
    }

    /// `order`-th derivative of the normalized function at `v`.
    pub fn eval(&self, v: f64, order: u8) -> Result<f64> {
        if !self.in_domain(v) || !v.is_finite() {
            return Err(Error::OutOfDomain {
                rho: self.to_string(),
                v,
            });
        }
        if order > 3 {
            return Err(Error::InvalidInput(format!("derivative order {order} > 3")));
        }
        Ok(self.eval_unchecked(v, order))
    }

    /// Like [`eval`](Self::eval) without the domain check; callers must
    /// guarantee `v` lies in the domain.
    #[inline]
    pub fn eval_unchecked(&self, v: f64, order: u8) -> f64 {
        match self {
            RhoFunction::Quadratic => match order {
                0 => -0.5 * (v + 1.0) * (v + 1.0),
                1 => -(v + 1.0),
                2 => -1.0,
                _ => 0.0,
            },
            RhoFunction::EmpiricalLikelihood => {
                let s = 1.0 - v;
                match order {
                    0 => s.ln(),
                    1 => -1.0 / s,
                    2 => -1.0 / (s * s),
                    _ => -2.0 / (s * s * s),
                }
            }
            RhoFunction::ExponentialTilting => -v.exp(),
            RhoFunction::PowerDivergence(theta) => {
                let t = *theta;
                let base = 1.0 + t * v;
                match order {
                    0 => -base.powf((t + 1.0) / t) / (t + 1.0),
                    1 => -base.powf(1.0 / t),
                    2 => -base.powf(1.0 / t - 1.0),
                    _ => -(1.0 - t) * base.powf(1.0 / t - 2.0),
                }
            }
            RhoFunction::Normalized(n) => n.derivative(v, order),
        }
    }

    /// Value, first and second derivative together.
    #[inline]
    pub fn eval012(&self, v: f64) -> (f64, f64, f64) {
        match self {
            RhoFunction::ExponentialTilting => {
                let e = -v.exp();
                (e, e, e)
            }
            RhoFunction::EmpiricalLikelihood => {
                let s = 1.0 - v;
                (s.ln(), -1.0 / s, -1.0 / (s * s))
            }
            _ => (
                self.eval_unchecked(v, 0),
                self.eval_unchecked(v, 1),
                self.eval_unchecked(v, 2),
            ),
        }
    }
}

/// Cressie-Read power divergence member for `theta`.
pub fn power_divergence(theta: f64) -> Result<RhoFunction> {
    if !theta.is_finite() {
        return Err(Error::InvalidInput(format!("theta = {theta}")));
    }
    if theta == 0.0 || theta == -1.0 {
        return Err(Error::ThetaAtLimit(theta));
    }
    Ok(RhoFunction::PowerDivergence(theta))
}

/// Rescales an arbitrary concave function so its first two derivatives at
/// zero equal -1.
pub fn normalize(raw: Arc<dyn RawRho>) -> Result<RhoFunction> {
    let d1 = raw.derivative(0.0, 1);
    let d2 = raw.derivative(0.0, 2);
    if d1 == 0.0 || d2 == 0.0 || !d1.is_finite() || !d2.is_finite() {
        return Err(Error::DegenerateRho);
    }
    Ok(RhoFunction::Normalized(Arc::new(NormalizedRho {
        raw,
        a: d1 / d2,
        b: -d2 / (d1 * d1),
    })))
}

impl fmt::Display for RhoFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoFunction::Quadratic => write!(f, "quadratic"),
            RhoFunction::EmpiricalLikelihood => write!(f, "el"),
            RhoFunction::ExponentialTilting => write!(f, "et"),
            RhoFunction::PowerDivergence(t) => write!(f, "cressie-read:{t}"),
            RhoFunction::Normalized(n) => write!(f, "normalized({})", n.raw.name()),
        }
    }
}

impl fmt::Debug for RhoFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl PartialEq for RhoFunction {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (RhoFunction::Quadratic, RhoFunction::Quadratic)
            | (RhoFunction::EmpiricalLikelihood, RhoFunction::EmpiricalLikelihood)
            | (RhoFunction::ExponentialTilting, RhoFunction::ExponentialTilting) => true,
            (RhoFunction::PowerDivergence(a), RhoFunction::PowerDivergence(b)) => a == b,
            (RhoFunction::Normalized(a), RhoFunction::Normalized(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl FromStr for RhoFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quadratic" | "q" => Ok(RhoFunction::Quadratic),
            "el" => Ok(RhoFunction::EmpiricalLikelihood),
            "et" => Ok(RhoFunction::ExponentialTilting),
            other => match other.strip_prefix("cressie-read:") {
                Some(t) => {
                    let theta: f64 = t
                        .parse()
                        .map_err(|_| Error::UnknownRho(s.to_string()))?;
                    power_divergence(theta)
                }
                None => Err(Error::UnknownRho(s.to_string())),
            },
        }
    }
}

impl serde::Serialize for RhoFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for RhoFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_kinds() -> Vec<RhoFunction> {
        vec![
            RhoFunction::Quadratic,
            RhoFunction::EmpiricalLikelihood,
            RhoFunction::ExponentialTilting,
            power_divergence(-2.0).unwrap(),
            power_divergence(-0.5).unwrap(),
            power_divergence(2.0 / 3.0).unwrap(),
            power_divergence(1.0).unwrap(),
        ]
    }

    #[test]
    fn named_examples() {
        assert_eq!(RhoFunction::Quadratic.eval(0.0, 1).unwrap(), -1.0);
        assert_eq!(RhoFunction::EmpiricalLikelihood.eval(0.5, 1).unwrap(), -2.0);
        let et = RhoFunction::ExponentialTilting.eval(1.0, 2).unwrap();
        assert!((et + std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn el_domain_violation() {
        assert!(matches!(
            RhoFunction::EmpiricalLikelihood.eval(1.0, 0),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(matches!(
            power_divergence(-2.0).unwrap().eval(0.5, 1),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn analytic_kinds_are_normalized_exactly() {
        for rho in all_kinds() {
            assert_eq!(rho.eval(0.0, 1).unwrap(), -1.0, "{rho}");
            assert_eq!(rho.eval(0.0, 2).unwrap(), -1.0, "{rho}");
        }
    }

    #[test]
    fn theta_one_is_quadratic() {
        let pd = power_divergence(1.0).unwrap();
        for v in [-0.5, 0.0, 0.5] {
            for order in 0..=3 {
                let a = pd.eval(v, order).unwrap();
                let b = RhoFunction::Quadratic.eval(v, order).unwrap();
                assert!((a - b).abs() <= 1e-12, "v={v} order={order}");
            }
        }
    }

    #[test]
    fn theta_limits_rejected() {
        assert!(matches!(power_divergence(0.0), Err(Error::ThetaAtLimit(_))));
        assert!(matches!(power_divergence(-1.0), Err(Error::ThetaAtLimit(_))));
    }

    #[test]
    fn normalize_shifted_quadratic() {
        // -(v - 1)^2 / 2 normalizes to -(v + 1)^2 / 2.
        let raw = FnRho(|v: f64, k: u8| match k {
            0 => -0.5 * (v - 1.0).powi(2),
            1 => -(v - 1.0),
            2 => -1.0,
            _ => 0.0,
        });
        let rho = normalize(Arc::new(raw)).unwrap();
        assert_eq!(rho.eval(0.0, 1).unwrap(), -1.0);
        let shift = rho.eval(0.0, 0).unwrap() - RhoFunction::Quadratic.eval(0.0, 0).unwrap();
        for v in [-2.0, -0.3, 0.7, 4.0] {
            let a = rho.eval(v, 0).unwrap();
            let b = RhoFunction::Quadratic.eval(v, 0).unwrap();
            assert!((a - b - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_exponential_fixed_point() {
        let raw = FnRho(|v: f64, _k: u8| -v.exp());
        let rho = normalize(Arc::new(raw)).unwrap();
        for v in [-1.0, 0.0, 0.4, 2.0] {
            for k in 0..=3 {
                let a = rho.eval(v, k).unwrap();
                let b = RhoFunction::ExponentialTilting.eval(v, k).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_scaled_exponential() {
        let raw = FnRho(|v: f64, _k: u8| -3.0 * v.exp());
        let rho = normalize(Arc::new(raw)).unwrap();
        // Central difference of the value, independent of the analytic path.
        let h = 1e-5;
        let fd = (rho.eval(h, 0).unwrap() - rho.eval(-h, 0).unwrap()) / (2.0 * h);
        assert!((fd + 1.0).abs() < 1e-9);
        assert!((rho.eval(0.0, 1).unwrap() + 1.0).abs() <= 1e-12);
        assert!((rho.eval(0.0, 2).unwrap() + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalize_reversed_domain() {
        struct RawEl;
        impl RawRho for RawEl {
            fn derivative(&self, v: f64, k: u8) -> f64 {
                // log(1 + v): first derivative positive at zero.
                let s = 1.0 + v;
                match k {
                    0 => s.ln(),
                    1 => 1.0 / s,
                    2 => -1.0 / (s * s),
                    _ => 2.0 / (s * s * s),
                }
            }
            fn domain(&self) -> (f64, f64) {
                (-1.0, f64::INFINITY)
            }
        }
        let rho = normalize(Arc::new(RawEl)).unwrap();
        assert_eq!(rho.domain(), (f64::NEG_INFINITY, 1.0));
        for v in [-3.0, 0.0, 0.5, 0.9] {
            let a = rho.eval(v, 1).unwrap();
            let b = RhoFunction::EmpiricalLikelihood.eval(v, 1).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_raw_rejected() {
        let raw = FnRho(|v: f64, k: u8| match k {
            0 => -v * v,
            1 => -2.0 * v,
            2 => -2.0,
            _ => 0.0,
        });
        assert!(matches!(normalize(Arc::new(raw)), Err(Error::DegenerateRho)));
    }

    #[test]
    fn names_round_trip() {
        for name in ["quadratic", "el", "et", "cressie-read:0.6666666666666666", "cressie-read:-2"] {
            let rho: RhoFunction = name.parse().unwrap();
            let again: RhoFunction = rho.to_string().parse().unwrap();
            assert_eq!(rho, again);
        }
        assert!("cressie-read:0".parse::<RhoFunction>().is_err());
        assert!("gmm".parse::<RhoFunction>().is_err());
    }

    fn sample_in_domain(rho: &RhoFunction, u: f64) -> f64 {
        let (lo, hi) = rho.domain();
        let lo = lo.max(-3.0);
        let hi = hi.min(3.0);
        // stay away from the boundary where derivatives blow up
        let span = hi - lo;
        lo + span * (0.02 + 0.96 * u)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn strictly_concave(u in 0.0f64..1.0) {
            for rho in all_kinds() {
                let v = sample_in_domain(&rho, u);
                prop_assert!(rho.eval(v, 2).unwrap() < 0.0);
                prop_assert!(rho.eval(v, 1).unwrap() != 0.0);
            }
        }

        #[test]
        fn derivatives_match_finite_differences(u in 0.0f64..1.0) {
            for rho in all_kinds() {
                let v = sample_in_domain(&rho, u);
                let h = 1e-5;
                for j in 0..3u8 {
                    let fd = (rho.eval(v + h, j).unwrap() - rho.eval(v - h, j).unwrap()) / (2.0 * h);
                    let an = rho.eval(v, j + 1).unwrap();
                    let scale = an.abs().max(1.0);
                    prop_assert!((fd - an).abs() <= 1e-6 * scale, "{} j={} v={} fd={} an={}", rho, j, v, fd, an);
                }
            }
        }
    }
}
