//! `gelcal`: calibration estimates from a CSV file and the Monte Carlo
//! studies of the estimators.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gelcal_core::data::ObservedSample;

use crate::config::{RunConfig, Workflow};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "gelcal", version, about = "Calibration estimators for missing-response data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the workflows; each one overrides the config file.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo replicates or subsamples.
    #[arg(long)]
    reps: Option<usize>,
    /// Criterion for `estimate`: quadratic, el, et or pd:<theta>.
    #[arg(long)]
    rho: Option<String>,
    /// Solve the `estimate` calibration without the feasibility box.
    #[arg(long)]
    no_box: bool,
    /// Worker threads for Monte Carlo runs.
    #[arg(long)]
    parallelism: Option<usize>,
    /// CSV output; a Markdown copy is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate means and exceedance probabilities from one data file.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// CSV with a `y` column, optional `r` column and covariates.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Response model, e.g. "r ~ x1 + x2".
        #[arg(long)]
        propensity: Option<String>,
        /// Working outcome model, e.g. "y ~ x1" or "I(y>240) ~ x1"; repeatable.
        #[arg(long = "model")]
        models: Vec<String>,
        /// `mean` or `P(y>c)`; repeatable.
        #[arg(long = "estimand")]
        estimands: Vec<String>,
        /// ipw, hajek, aipw, ols or cal; repeatable.
        #[arg(long = "estimator")]
        estimators: Vec<String>,
        /// Token marking a missing response.
        #[arg(long)]
        missing_token: Option<String>,
        /// Confidence level of the intervals.
        #[arg(long)]
        level: Option<f64>,
    },
    /// Run one of the Kang–Schafer studies.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// comparison, interaction, standard-errors, nested-models,
        /// multipurpose or oracle.
        study: Option<String>,
        /// Units per replicate.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Repeated subsampling of a fully observed data set.
    ResampleStudy {
        #[command(flatten)]
        common: Common,
        /// Fully observed CSV; the synthetic expenditure data when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Size of the synthetic data set.
        #[arg(long)]
        synthetic_n: Option<usize>,
    },
    /// Parse a formula and list its design columns.
    FormulaCheck {
        formula: String,
        /// Check the referenced columns against this CSV header.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

impl Common {
    fn resolve(self, workflow: Workflow) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        c.workflow = Some(workflow);
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.reps {
            c.reps = v;
        }
        if let Some(v) = self.rho {
            c.rho = v;
        }
        if self.no_box {
            c.feasibility_box = false;
        }
        if let Some(v) = self.parallelism {
            c.parallelism = v;
        }
        if self.out.is_some() {
            c.output = self.out;
        }
        Ok(c)
    }
}

fn column_names(path: &PathBuf) -> Result<Vec<String>, CliError> {
    let sample: ObservedSample = gelcal_core::load_csv(path, "NA")?;
    Ok(sample.column_names().to_vec())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (config, study_table) = match cli.command {
        Command::FormulaCheck { formula, input } => {
            let cols = input.as_ref().map(column_names).transpose()?;
            print!("{}", commands::formula_check(&formula, cols.as_deref())?);
            return Ok(());
        }
        Command::Estimate {
            common,
            input,
            propensity,
            models,
            estimands,
            estimators,
            missing_token,
            level,
        } => {
            let mut c = common.resolve(Workflow::Estimate)?;
            if input.is_some() {
                c.input = input;
            }
            if propensity.is_some() {
                c.propensity = propensity;
            }
            if !models.is_empty() {
                c.working_models = models;
            }
            if !estimands.is_empty() {
                c.estimands = estimands;
            }
            if !estimators.is_empty() {
                c.estimators = estimators;
            }
            if let Some(t) = missing_token {
                c.missing_token = t;
            }
            if let Some(l) = level {
                c.level = l;
            }
            (c, false)
        }
        Command::Simulate { common, study, n } => {
            let mut c = common.resolve(Workflow::Simulate)?;
            if let Some(s) = study {
                c.simulation.study = s;
            }
            if let Some(n) = n {
                c.simulation.n = n;
            }
            (c, true)
        }
        Command::ResampleStudy {
            common,
            input,
            synthetic_n,
        } => {
            let mut c = common.resolve(Workflow::ResampleStudy)?;
            if input.is_some() {
                c.input = input;
            }
            if let Some(n) = synthetic_n {
                c.resample.synthetic_n = n;
            }
            (c, true)
        }
    };

    let validated = config.validate()?;
    let header = commands::provenance(&config);
    let (csv, markdown) = if study_table {
        let table = if config.workflow == Some(Workflow::Simulate) {
            commands::simulate(&config, &validated)?
        } else {
            commands::resample(&config, &validated)?
        };
        (commands::table_csv(&table, &header)?, table.to_markdown(&header))
    } else {
        let report = commands::estimate(&config, &validated)?;
        (
            commands::estimate_csv(&report, &header)?,
            commands::estimate_markdown(&report, &header, config.level),
        )
    };
    if let Some(path) = &config.output {
        commands::write_outputs(path, &csv, &markdown)?;
    }
    print!("{markdown}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::usage(e.to_string().trim_end()).to_json());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
