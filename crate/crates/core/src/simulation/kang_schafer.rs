//! The Kang–Schafer design: four latent normals Z, observed transforms X,
//! a response linear in Z and responses missing with logit −Z₁+0.5Z₂−0.25Z₃−0.1Z₄.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{FullSample, ObservedSample};
use crate::error::{Error, Result};
use crate::fit::logistic;
use crate::inference::normal_quantile;
use crate::numeric::Matrix;

pub const LATENT_COLUMNS: [&str; 4] = ["z1", "z2", "z3", "z4"];
pub const OBSERVED_COLUMNS: [&str; 4] = ["x1", "x2", "x3", "x4"];

/// E(Y) in both variants of the design.
pub const TRUE_MEAN: f64 = 210.0;

const SLOPES: [f64; 4] = [27.4, 13.7, 13.7, 13.7];
const INTERACTION: f64 = 20.0;
const MISSINGNESS: [f64; 4] = [-1.0, 0.5, -0.25, -0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KangSchaferConfig {
    pub n: usize,
    /// Adds 20·Z₁Z₂ to the mean of Y.
    pub interaction: bool,
    pub seed: u64,
}

/// One simulated data set: the complete data and its masked version.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReplicate {
    pub full: FullSample,
    pub observed: ObservedSample,
}

/// Uniform on (0, 1) from the top 53 bits, never exactly 0 or 1.
pub(crate) fn open_uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    normal_quantile(open_uniform(rng))
}

/// Observed covariates (x1, x2, x3, x4) for latent z.
pub fn observed_covariates(z: &[f64; 4]) -> [f64; 4] {
    [
        (z[0] / 2.0).exp(),
        z[1] / (1.0 + z[0].exp()),
        (z[0] * z[2] / 25.0 + 0.6).powi(3),
        (z[1] + z[3] + 20.0).powi(2),
    ]
}

/// E(Y | z).
pub fn conditional_mean(z: &[f64; 4], interaction: bool) -> f64 {
    let mut m = TRUE_MEAN + SLOPES.iter().zip(z).map(|(b, v)| b * v).sum::<f64>();
    if interaction {
        m += INTERACTION * z[0] * z[1];
    }
    m
}

/// P(r = 1 | z).
pub fn response_probability(z: &[f64; 4]) -> f64 {
    logistic(MISSINGNESS.iter().zip(z).map(|(b, v)| b * v).sum())
}

/// Columns z1..z4 then x1..x4.
pub fn column_names() -> Vec<String> {
    LATENT_COLUMNS
        .iter()
        .chain(OBSERVED_COLUMNS.iter())
        .map(|s| s.to_string())
        .collect()
}

/// Draws one replicate. Each unit consumes six uniforms in a fixed order
/// (z1..z4, the outcome error, the response indicator), so the stream is
/// reproducible from the seed alone.
pub fn generate_kang_schafer(config: &KangSchaferConfig) -> Result<ScenarioReplicate> {
    if config.n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n;
    let mut x = Matrix::zeros(n, 8);
    let mut y = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for i in 0..n {
        let z = [
            standard_normal(&mut rng),
            standard_normal(&mut rng),
            standard_normal(&mut rng),
            standard_normal(&mut rng),
        ];
        let e = standard_normal(&mut rng);
        let u = open_uniform(&mut rng);
        for (j, v) in z.iter().chain(observed_covariates(&z).iter()).enumerate() {
            x[(i, j)] = *v;
        }
        y.push(conditional_mean(&z, config.interaction) + e);
        r.push(u < response_probability(&z));
    }
    if !r.iter().any(|&v| v) {
        // Only reachable for tiny n; keep the first unit so the sample is valid.
        r[0] = true;
    }
    let full = FullSample::new(y, x, column_names())?;
    let observed = full.mask(r)?;
    Ok(ScenarioReplicate { full, observed })
}

fn phi_upper(t: f64) -> f64 {
    Normal::standard().sf(t)
}

/// P(Y > threshold) under the design.
///
/// Without the interaction Y is normal with variance 27.4² + 3·13.7² + 1.
/// With it, Y given (Z₁, Z₂) is normal with variance 2·13.7² + 1 and the
/// outer expectation is a trapezoid rule on a 0.02 grid over [−8, 8]².
pub fn tail_probability(threshold: f64, interaction: bool) -> f64 {
    if !interaction {
        let var = SLOPES.iter().map(|b| b * b).sum::<f64>() + 1.0;
        return phi_upper((threshold - TRUE_MEAN) / var.sqrt());
    }
    tail_probability_quadrature(threshold, INTERACTION)
}

fn tail_probability_quadrature(threshold: f64, interaction: f64) -> f64 {
    let sd = (SLOPES[2] * SLOPES[2] + SLOPES[3] * SLOPES[3] + 1.0).sqrt();
    let h = 0.02;
    let k = (8.0 / h) as i64;
    let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for a in -k..=k {
        let z1 = a as f64 * h;
        let w1 = density(z1) * if a.abs() == k { 0.5 } else { 1.0 };
        let mut inner = 0.0;
        for b in -k..=k {
            let z2 = b as f64 * h;
            let w2 = density(z2) * if b.abs() == k { 0.5 } else { 1.0 };
            let m = TRUE_MEAN + SLOPES[0] * z1 + SLOPES[1] * z2 + interaction * z1 * z2;
            inner += w2 * phi_upper((threshold - m) / sd);
        }
        total += w1 * inner;
    }
    total * h * h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_latent_unit() {
        let x = observed_covariates(&[0.0; 4]);
        assert_eq!(x[0], 1.0);
        assert_eq!(x[1], 0.0);
        assert!((x[2] - 0.216).abs() < 1e-15);
        assert_eq!(x[3], 400.0);
        assert_eq!(conditional_mean(&[0.0; 4], false), 210.0);
        assert_eq!(conditional_mean(&[0.0; 4], true), 210.0);
        assert_eq!(response_probability(&[0.0; 4]), 0.5);
    }

    #[test]
    fn same_seed_same_replicate() {
        let cfg = KangSchaferConfig { n: 500, interaction: false, seed: 17 };
        let a = generate_kang_schafer(&cfg).unwrap();
        let b = generate_kang_schafer(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_kang_schafer(&KangSchaferConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a.full.y(), c.full.y());
    }

    #[test]
    fn masking_consistent() {
        let rep = generate_kang_schafer(&KangSchaferConfig { n: 300, interaction: true, seed: 3 }).unwrap();
        for i in 0..300 {
            match rep.observed.y()[i] {
                Some(v) => assert_eq!(v, rep.full.y()[i]),
                None => assert!(!rep.observed.r()[i]),
            }
        }
        assert_eq!(rep.full.x(), rep.observed.x());
    }

    #[test]
    fn large_sample_moments() {
        let rep = generate_kang_schafer(&KangSchaferConfig { n: 1_000_000, interaction: false, seed: 2024 }).unwrap();
        let mean_y = rep.full.mean();
        let mean_r = rep.observed.n_complete() as f64 / 1e6;
        assert!((mean_y - 210.0).abs() < 0.1, "{mean_y}");
        assert!((mean_r - 0.5).abs() < 0.002, "{mean_r}");
        // latent columns are standard normal
        for j in 0..4 {
            let col = rep.full.x().column(j);
            let m = col.iter().sum::<f64>() / 1e6;
            let v = col.iter().map(|z| (z - m).powi(2)).sum::<f64>() / 1e6;
            assert!(m.abs() < 0.005 && (v - 1.0).abs() < 0.01, "z{}: {m} {v}", j + 1);
        }
    }

    #[test]
    fn tail_closed_form_matches_quadrature() {
        for c in [180.0, 210.0, 240.0, 280.0] {
            let closed = tail_probability(c, false);
            let quad = tail_probability_quadrature(c, 0.0);
            assert!((closed - quad).abs() < 1e-9, "{c}: {closed} {quad}");
        }
        assert!((tail_probability(210.0, false) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tail_with_interaction_matches_simulation() {
        let rep = generate_kang_schafer(&KangSchaferConfig { n: 400_000, interaction: true, seed: 5 }).unwrap();
        let hits = rep.full.y().iter().filter(|&&v| v > 240.0).count() as f64 / 4e5;
        let p = tail_probability(240.0, true);
        let se = (p * (1.0 - p) / 4e5).sqrt();
        assert!((hits - p).abs() < 4.0 * se, "{hits} vs {p}");
    }
}
