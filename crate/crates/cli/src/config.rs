//! Run configuration: a TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use gelcal_core::simulation::resample::{EXPENDITURE_THRESHOLD, MissingnessModel};
use gelcal_core::{parse_formula, EstimandSpec, FormulaSpec, RhoFunction, Study};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Workflow {
    Estimate,
    Simulate,
    ResampleStudy,
}

impl Workflow {
    pub fn name(self) -> &'static str {
        match self {
            Workflow::Estimate => "estimate",
            Workflow::Simulate => "simulate",
            Workflow::ResampleStudy => "resample-study",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Ipw,
    Hajek,
    Aipw,
    Ols,
    Cal,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Ipw,
        Estimator::Hajek,
        Estimator::Aipw,
        Estimator::Ols,
        Estimator::Cal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ipw => "ipw",
            Estimator::Hajek => "hajek",
            Estimator::Aipw => "aipw",
            Estimator::Ols => "ols",
            Estimator::Cal => "cal",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CliError::usage(format!("unknown estimator {s:?}; expected ipw, hajek, aipw, ols or cal")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub study: String,
    /// Units per replicate.
    pub n: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            study: Study::Comparison.name().into(),
            n: 1000,
        }
    }
}

/// Response model and working models of the resampling study. The defaults
/// fit the synthetic expenditure data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    /// Size of the synthetic population when no input file is given.
    pub synthetic_n: usize,
    pub missingness: String,
    pub coefficients: Vec<f64>,
    pub misspecified: String,
    pub outcome: String,
    pub threshold: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            synthetic_n: 2687,
            missingness: "r ~ x1 + x1:I(x1>=3) + x2".into(),
            coefficients: vec![-0.2, -0.35, 0.2, 0.22],
            misspecified: "r ~ x1 + x1:I(x1>=3)".into(),
            outcome: "y ~ x1 + x2".into(),
            threshold: EXPENDITURE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workflow: Option<Workflow>,
    pub input: Option<PathBuf>,
    pub missing_token: String,
    pub rho: String,
    pub feasibility_box: bool,
    pub propensity: Option<String>,
    pub working_models: Vec<String>,
    pub estimands: Vec<String>,
    pub estimators: Vec<String>,
    pub level: f64,
    pub seed: u64,
    pub reps: usize,
    pub parallelism: usize,
    pub output: Option<PathBuf>,
    pub simulation: SimulationConfig,
    pub resample: ResampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workflow: None,
            input: None,
            missing_token: "NA".into(),
            rho: "quadratic".into(),
            feasibility_box: true,
            propensity: None,
            working_models: Vec::new(),
            estimands: vec!["mean".into()],
            estimators: ["ipw", "aipw", "ols", "cal"].map(String::from).to_vec(),
            level: 0.95,
            seed: 1,
            reps: 1000,
            parallelism: 1,
            output: None,
            simulation: SimulationConfig::default(),
            resample: ResampleConfig::default(),
        }
    }
}

/// A configuration with every string field parsed.
#[derive(Debug, Clone)]
pub struct Validated {
    pub rho: RhoFunction,
    pub propensity: Option<FormulaSpec>,
    pub working_models: Vec<FormulaSpec>,
    pub estimands: Vec<EstimandSpec>,
    pub estimators: Vec<Estimator>,
    pub study: Study,
    pub missingness: MissingnessModel,
    pub misspecified: FormulaSpec,
    pub outcome: FormulaSpec,
}

fn formula(text: &str, role: &str) -> Result<FormulaSpec, CliError> {
    parse_formula(text).map_err(|e| CliError::from(e).context(&format!("{role} formula {text:?}")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read configuration {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<Validated, CliError> {
        let rho: RhoFunction = self.rho.parse()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::usage(format!("level {} outside (0, 1)", self.level)));
        }
        if self.parallelism == 0 {
            return Err(CliError::usage("parallelism must be at least 1"));
        }
        if self.reps < 2 {
            return Err(CliError::usage("at least 2 replicates are needed"));
        }
        if self.simulation.n == 0 || self.resample.synthetic_n == 0 {
            return Err(CliError::usage("sample sizes must be at least 1"));
        }
        let propensity = self
            .propensity
            .as_deref()
            .map(|t| formula(t, "propensity"))
            .transpose()?;
        let working_models = self
            .working_models
            .iter()
            .map(|t| formula(t, "working model"))
            .collect::<Result<Vec<_>, _>>()?;
        let estimands = self
            .estimands
            .iter()
            .map(|e| e.parse::<EstimandSpec>().map_err(CliError::from))
            .collect::<Result<Vec<_>, _>>()?;
        let estimators = self
            .estimators
            .iter()
            .map(|e| Estimator::parse(e))
            .collect::<Result<Vec<_>, _>>()?;
        let study: Study = self.simulation.study.parse()?;
        let r = &self.resample;
        let missingness = MissingnessModel::new(formula(&r.missingness, "missingness")?.features, r.coefficients.clone())?;
        Ok(Validated {
            rho,
            propensity,
            working_models,
            estimands,
            estimators,
            study,
            missingness,
            misspecified: formula(&r.misspecified, "misspecified missingness")?,
            outcome: formula(&r.outcome, "outcome")?,
        })
    }
}
