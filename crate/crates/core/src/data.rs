//! Sample representation and CSV ingestion.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const DEFAULT_MISSING_TOKEN: &str = "NA";

/// Observed data `(r_i, r_i y_i, x_i)` for `N` units.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSample {
    y: Vec<Option<f64>>,
    r: Vec<bool>,
    x: Matrix,
    column_names: Vec<String>,
}

impl ObservedSample {
    /// Builds a sample, checking that `y` is present exactly where `r` is set
    /// and that at least one unit is complete.
    pub fn new(
        y: Vec<Option<f64>>,
        r: Vec<bool>,
        x: Matrix,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if r.len() != n || x.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has {n} units, r has {}, x has {} rows",
                r.len(),
                x.rows()
            )));
        }
        if column_names.len() != x.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{} column names for {} covariates",
                column_names.len(),
                x.cols()
            )));
        }
        for (i, (yi, &ri)) in y.iter().zip(&r).enumerate() {
            match (yi, ri) {
                (Some(_), false) => {
                    return Err(Error::InvariantViolation(format!(
                        "unit {i}: y present where r = 0"
                    )))
                }
                (None, true) => {
                    return Err(Error::InvariantViolation(format!(
                        "unit {i}: y missing where r = 1"
                    )))
                }
                (Some(v), true) if !v.is_finite() => {
                    return Err(Error::InvariantViolation(format!("unit {i}: y not finite")))
                }
                _ => {}
            }
        }
        if !r.iter().any(|&b| b) {
            return Err(Error::InvariantViolation("no complete cases".into()));
        }
        Ok(Self {
            y,
            r,
            x,
            column_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_complete(&self) -> usize {
        self.r.iter().filter(|&&b| b).count()
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn r(&self) -> &[bool] {
        &self.r
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    /// Indices of complete cases in ascending order.
    pub fn complete_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.r[i]).collect()
    }

    /// `r_i` as 0/1 reals.
    pub fn r_as_f64(&self) -> Vec<f64> {
        self.r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `y` with missing entries replaced by zero, i.e. `r_i y_i`.
    pub fn ry(&self) -> Vec<f64> {
        self.y.iter().map(|v| v.unwrap_or(0.0)).collect()
    }

    /// Same sample with `y` replaced by `h(y)` on complete cases.
    pub fn map_y(&self, h: impl Fn(f64) -> f64) -> Result<Self> {
        let y = self.y.iter().map(|v| v.map(&h)).collect();
        Self::new(y, self.r.clone(), self.x.clone(), self.column_names.clone())
    }
}

/// Fully observed data, used as ground truth by the simulation harness.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSample {
    y: Vec<f64>,
    x: Matrix,
    column_names: Vec<String>,
}

impl FullSample {
    pub fn new(y: Vec<f64>, x: Matrix, column_names: Vec<String>) -> Result<Self> {
        if y.len() != x.rows() || column_names.len() != x.cols() {
            return Err(Error::DimensionMismatch(format!(
                "y has {} units, x is {}x{}, {} column names",
                y.len(),
                x.rows(),
                x.cols(),
                column_names.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("y not finite".into()));
        }
        Ok(Self { y, x, column_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Hides `y` wherever `r` is false.
    pub fn mask(&self, r: Vec<bool>) -> Result<ObservedSample> {
        let y = self
            .y
            .iter()
            .zip(&r)
            .map(|(&v, &keep)| keep.then_some(v))
            .collect();
        ObservedSample::new(y, r, self.x.clone(), self.column_names.clone())
    }

    pub fn mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n() as f64
    }
}

/// Reads a sample from CSV.
///
/// The header must contain a `y` column; an optional `r` column gives the
/// nonmissing indicator, otherwise `r` is derived from the presence of `y`.
/// Every other column is a numeric covariate.
pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<ObservedSample> {
    let file = std::fs::File::open(path)?;
    read_csv(file, missing_token)
}

pub fn read_csv<R: Read>(reader: R, missing_token: &str) -> Result<ObservedSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let y_col = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::Parse {
            line: 1,
            column: "y".into(),
            message: "header has no column named \"y\"".into(),
        })?;
    let r_col = header.iter().position(|h| h == "r");
    let covariates: Vec<usize> = (0..header.len())
        .filter(|&j| j != y_col && Some(j) != r_col)
        .collect();

    let is_missing = |s: &str| s.is_empty() || s == missing_token;
    let mut y = Vec::new();
    let mut r = Vec::new();
    let mut x = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let parse = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    column: header[j].clone(),
                    message: format!("cannot parse {raw:?} as a finite number"),
                })
        };
        let y_raw = record.get(y_col).unwrap_or("");
        let yi = if is_missing(y_raw) { None } else { Some(parse(y_col)?) };
        let ri = match r_col {
            Some(j) => match parse(j)? {
                1.0 => true,
                0.0 => false,
                v => {
                    return Err(Error::Parse {
                        line,
                        column: "r".into(),
                        message: format!("indicator must be 0 or 1, got {v}"),
                    })
                }
            },
            None => yi.is_some(),
        };
        if yi.is_some() && !ri {
            return Err(Error::InvariantViolation(format!(
                "line {line}: y present where r = 0"
            )));
        }
        if yi.is_none() && ri {
            return Err(Error::InvariantViolation(format!(
                "line {line}: y missing where r = 1"
            )));
        }
        for &j in &covariates {
            x.push(parse(j)?);
        }
        y.push(yi);
        r.push(ri);
    }
    let names: Vec<String> = covariates.iter().map(|&j| header[j].clone()).collect();
    let x = Matrix::new(y.len(), names.len(), x)?;
    ObservedSample::new(y, r, x, names)
}

/// Writes `y`, `r` and the covariates; missing `y` is written as `missing_token`.
pub fn write_csv<W: Write>(sample: &ObservedSample, writer: W, missing_token: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string(), "r".to_string()];
    header.extend(sample.column_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..sample.n() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(match sample.y[i] {
            Some(v) => v.to_string(),
            None => missing_token.to_string(),
        });
        rec.push(if sample.r[i] { "1" } else { "0" }.to_string());
        rec.extend(sample.x.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(sample: &ObservedSample, path: impl AsRef<Path>, missing_token: &str) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(sample, std::io::BufWriter::new(file), missing_token)
}

/// Writes a fully observed sample (no `r` column).
pub fn write_full_csv<W: Write>(sample: &FullSample, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string()];
    header.extend(sample.column_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..sample.n() {
        let mut rec = vec![sample.y[i].to_string()];
        rec.extend(sample.x.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a fully observed sample; every `y` must be present.
pub fn read_full_csv<R: Read>(reader: R) -> Result<FullSample> {
    let sample = read_csv(reader, DEFAULT_MISSING_TOKEN)?;
    if sample.n_complete() != sample.n() {
        return Err(Error::InvariantViolation(
            "full-data file contains missing y".into(),
        ));
    }
    FullSample::new(sample.ry(), sample.x, sample.column_names)
}
