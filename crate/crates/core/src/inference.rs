//! Plug-in standard errors and Wald intervals for calibration estimates.

use serde::Serialize;

use crate::data::ObservedSample;
use crate::error::{Error, Result};
use crate::estimators::ResponseFunction;
use crate::fit::{fit_best_linear_predictor, BestLinearPredictorFit, BlpWeighting, PropensityFit};
use crate::numeric::{dot, Cholesky, Matrix};

/// Propensities closer than this to 0 or 1 trigger a warning.
pub const EXTREME_PROPENSITY: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct VariancePlugin {
    /// Predictions adjusted for estimation of the propensity parameters.
    pub m_tilde_hat: Vec<f64>,
    pub a2_hat: Vec<f64>,
    #[serde(skip)]
    pub s_hat: Matrix,
    pub variance: f64,
    pub warnings: Vec<String>,
}

impl VariancePlugin {
    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Plug-in variance of a calibration estimate `mu_hat` of E(Y).
///
/// With ∂πᵢ = ∂π(xᵢ; β̂)/∂β,
/// Â₂ = −N⁻¹ Σ rᵢ πᵢ⁻² ∂πᵢ (yᵢ − mᵢ),
/// Ŝ = N⁻¹ Σ πᵢ⁻¹ (1 − πᵢ)⁻¹ ∂πᵢ ∂πᵢᵀ,
/// m̃ᵢ = mᵢ − Â₂ᵀ Ŝ⁻¹ ∂πᵢ / (1 − πᵢ), and the variance is
/// N⁻² Σ [rᵢ/πᵢ (yᵢ − m̃ᵢ) + m̃ᵢ − μ̂]².
pub fn plugin_variance(
    sample: &ObservedSample,
    propensity: &PropensityFit,
    blp: &BestLinearPredictorFit,
    mu_hat: f64,
) -> Result<VariancePlugin> {
    plugin_variance_for(sample.y(), sample.r(), propensity, &blp.m_hat, mu_hat)
}

/// As [`plugin_variance`], for responses `y` (indexed by unit) and
/// predictions `m`.
pub fn plugin_variance_for(
    y: &[Option<f64>],
    r: &[bool],
    propensity: &PropensityFit,
    m: &[f64],
    mu_hat: f64,
) -> Result<VariancePlugin> {
    let n = r.len();
    if y.len() != n || m.len() != n || propensity.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} units, {} responses, {} predictions, {} propensities",
            y.len(),
            m.len(),
            propensity.n()
        )));
    }
    if propensity.design().is_none() {
        return Err(Error::InvalidInput(
            "plug-in variance needs a fitted propensity model".into(),
        ));
    }
    let p = propensity.beta.len();
    let nf = n as f64;
    let mut warnings = Vec::new();
    let extreme = propensity
        .pi
        .iter()
        .filter(|&&pi| !(EXTREME_PROPENSITY..=1.0 - EXTREME_PROPENSITY).contains(&pi))
        .count();
    if extreme > 0 {
        warnings.push(format!("{extreme} propensities within {EXTREME_PROPENSITY} of 0 or 1"));
    }

    let mut a2 = vec![0.0; p];
    let mut s = Matrix::zeros(p, p);
    let grads: Vec<Vec<f64>> = (0..n).map(|i| propensity.gradient(i).unwrap_or_default()).collect();
    for i in 0..n {
        let pi = propensity.pi[i];
        let g = &grads[i];
        if r[i] {
            let resid = y[i].unwrap_or(f64::NAN) - m[i];
            for (a, gj) in a2.iter_mut().zip(g) {
                *a -= resid * gj / (pi * pi * nf);
            }
        }
        s.rank_one_update(1.0 / (pi * (1.0 - pi) * nf), g);
    }
    let direction = Cholesky::new(&s)?.solve(&a2)?;
    let m_tilde: Vec<f64> = (0..n)
        .map(|i| m[i] - dot(&direction, &grads[i]) / (1.0 - propensity.pi[i]))
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let ipw = if r[i] {
            (y[i].unwrap_or(f64::NAN) - m_tilde[i]) / propensity.pi[i]
        } else {
            0.0
        };
        total += (ipw + m_tilde[i] - mu_hat).powi(2);
    }
    Ok(VariancePlugin {
        m_tilde_hat: m_tilde,
        a2_hat: a2,
        s_hat: s,
        variance: total / (nf * nf),
        warnings,
    })
}

/// Plug-in variance of a calibration estimate `value` of E(h(Y)) with
/// calibration functions `u`: the predictor of h(y) is its best linear
/// predictor in u under 1/π weights.
pub fn calibration_variance(
    sample: &ObservedSample,
    propensity: &PropensityFit,
    u: &Matrix,
    h: &ResponseFunction,
    value: f64,
) -> Result<VariancePlugin> {
    let mapped = sample.map_y(|y| h.apply(y))?;
    let blp = fit_best_linear_predictor(&mapped, u, propensity, BlpWeighting::InverseProbability)?;
    plugin_variance(&mapped, propensity, &blp, value)
}

/// Two-sided Wald interval value ± z·se at confidence `level`.
pub fn wald_ci(value: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    if !(se >= 0.0) {
        return Err(Error::InvalidInput(format!("standard error {se} is negative")));
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    Ok((value - z * se, value + z * se))
}

/// Standard normal quantile (Wichura's AS 241, about 16 significant digits).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p.is_nan() {
        return f64::NAN;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];
