//! Monte Carlo summaries of replicate estimates.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// One replicate's contribution for one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplicateOutcome {
    Estimate {
        value: f64,
        se: Option<f64>,
        restricted: bool,
    },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McMetrics {
    pub group: String,
    pub estimator: String,
    pub estimand: String,
    pub truth: f64,
    pub bias: f64,
    /// Sample standard deviation of the estimates (n_reps − 1 denominator).
    pub sse: f64,
    pub rmse: f64,
    /// RMSE over the RMSE of the least-squares prediction estimator in the
    /// same group.
    pub re_rmse_vs_ols: Option<f64>,
    /// MSE over the MSE of the IPW estimator in the same group.
    pub re_mse_vs_ipw: Option<f64>,
    /// Mean percentage relative bias, 100·bias/truth.
    pub rb_percent: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
    /// Replicates that produced an estimate.
    pub n_reps: usize,
    pub failed_reps: usize,
    /// Replicates whose calibration weights were stopped by the feasibility box.
    pub restricted_reps: usize,
}

impl McMetrics {
    pub fn mse(&self) -> f64 {
        self.rmse * self.rmse
    }
}

/// Summarizes the outcomes of one estimator. `level` is the nominal
/// interval coverage used for the coverage column.
pub fn summarize(
    group: &str,
    estimator: &str,
    estimand: &str,
    truth: f64,
    outcomes: &[ReplicateOutcome],
    level: f64,
) -> McMetrics {
    let z = crate::inference::normal_quantile(0.5 + level / 2.0);
    let mut values = Vec::with_capacity(outcomes.len());
    let mut ses = Vec::new();
    let mut covered = 0usize;
    let mut failed = 0;
    let mut restricted = 0;
    for o in outcomes {
        match *o {
            ReplicateOutcome::Estimate { value, se, restricted: b } => {
                values.push(value);
                if let Some(s) = se {
                    ses.push(s);
                    if (value - truth).abs() <= z * s {
                        covered += 1;
                    }
                }
                if b {
                    restricted += 1;
                }
            }
            ReplicateOutcome::Failed => failed += 1,
        }
    }
    let k = values.len();
    let (bias, sse, rmse) = if k == 0 {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = values.iter().sum::<f64>() / k as f64;
        let sse = if k > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        let bias = values.iter().map(|v| v - truth).sum::<f64>() / k as f64;
        let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / k as f64;
        (bias, sse, mse.sqrt())
    };
    // Coverage is only defined when every successful replicate has an SE.
    let with_se = !ses.is_empty() && ses.len() == k;
    McMetrics {
        group: group.to_string(),
        estimator: estimator.to_string(),
        estimand: estimand.to_string(),
        truth,
        bias,
        sse,
        rmse,
        re_rmse_vs_ols: None,
        re_mse_vs_ipw: None,
        rb_percent: (truth != 0.0 && k > 0).then(|| 100.0 * bias / truth),
        coverage: with_se.then(|| covered as f64 / k as f64),
        mean_se: with_se.then(|| ses.iter().sum::<f64>() / k as f64),
        n_reps: k,
        failed_reps: failed,
        restricted_reps: restricted,
    }
}

/// Rows of a study, in grid order, with provenance for the written files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McTable {
    pub title: String,
    pub rows: Vec<McMetrics>,
}

impl McTable {
    pub fn new(title: impl Into<String>, mut rows: Vec<McMetrics>) -> Self {
        fill_relative_efficiency(&mut rows);
        Self { title: title.into(), rows }
    }

    pub fn row(&self, group: &str, estimator: &str, estimand: &str) -> Option<&McMetrics> {
        self.rows
            .iter()
            .find(|m| m.group == group && m.estimator == estimator && m.estimand == estimand)
    }

    /// CSV with one row per (group, estimator, estimand). `header` lines are
    /// written first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, writer: W, header: &[String]) -> Result<()> {
        let mut writer = writer;
        for line in header {
            writeln!(writer, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "group",
            "estimator",
            "estimand",
            "truth",
            "bias",
            "sse",
            "rmse",
            "re_rmse_vs_ols",
            "re_mse_vs_ipw",
            "rb_percent",
            "coverage",
            "mean_se",
            "n_reps",
            "failed_reps",
            "restricted_reps",
        ])
        ?;
        for m in &self.rows {
            w.write_record([
                m.group.clone(),
                m.estimator.clone(),
                m.estimand.clone(),
                fmt_f(m.truth),
                fmt_f(m.bias),
                fmt_f(m.sse),
                fmt_f(m.rmse),
                fmt_opt(m.re_rmse_vs_ols),
                fmt_opt(m.re_mse_vs_ipw),
                fmt_opt(m.rb_percent),
                fmt_opt(m.coverage),
                fmt_opt(m.mean_se),
                m.n_reps.to_string(),
                m.failed_reps.to_string(),
                m.restricted_reps.to_string(),
            ])
            ?;
        }
        w.flush().map_err(Error::from)
    }

    /// Aligned Markdown table, header lines as an HTML comment.
    pub fn to_markdown(&self, header: &[String]) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str("<!--\n");
            for line in header {
                let _ = writeln!(out, "{line}");
            }
            out.push_str("-->\n\n");
        }
        let _ = writeln!(out, "## {}\n", self.title);
        let heads = [
            "group", "estimator", "estimand", "bias", "SSE", "RMSE", "RE(ols)", "RE(ipw)", "RB%", "SEE",
            "coverage", "reps", "failed", "restricted",
        ];
        let mut cells: Vec<Vec<String>> = vec![heads.iter().map(|s| s.to_string()).collect()];
        for m in &self.rows {
            cells.push(vec![
                m.group.clone(),
                m.estimator.clone(),
                m.estimand.clone(),
                format!("{:.4}", m.bias),
                format!("{:.4}", m.sse),
                format!("{:.4}", m.rmse),
                opt4(m.re_rmse_vs_ols),
                opt4(m.re_mse_vs_ipw),
                m.rb_percent.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                opt4(m.mean_se),
                m.coverage.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into()),
                m.n_reps.to_string(),
                m.failed_reps.to_string(),
                m.restricted_reps.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..heads.len())
            .map(|j| cells.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        for (k, row) in cells.iter().enumerate() {
            out.push('|');
            for (j, c) in row.iter().enumerate() {
                let pad = widths[j] - c.chars().count();
                if j < 3 {
                    let _ = write!(out, " {c}{} |", " ".repeat(pad));
                } else {
                    let _ = write!(out, " {}{c} |", " ".repeat(pad));
                }
            }
            out.push('\n');
            if k == 0 {
                out.push('|');
                for (j, w) in widths.iter().enumerate() {
                    if j < 3 {
                        let _ = write!(out, "{}|", "-".repeat(w + 2));
                    } else {
                        let _ = write!(out, "{}:|", "-".repeat(w + 1));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

// Full round-trip precision so that tables can be compared bit for bit.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn opt4(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Reference rows are the estimators named "ols" and "ipw" within the same
/// group and estimand.
fn fill_relative_efficiency(rows: &mut [McMetrics]) {
    let lookup = |rows: &[McMetrics], g: &str, e: &str, name: &str| {
        rows.iter()
            .find(|m| m.group == g && m.estimand == e && m.estimator == name)
            .map(|m| m.rmse)
    };
    let refs: Vec<(Option<f64>, Option<f64>)> = rows
        .iter()
        .map(|m| {
            (
                lookup(rows, &m.group, &m.estimand, "ols"),
                lookup(rows, &m.group, &m.estimand, "ipw"),
            )
        })
        .collect();
    for (m, (ols, ipw)) in rows.iter_mut().zip(refs) {
        m.re_rmse_vs_ols = ols.filter(|r| *r > 0.0).map(|r| m.rmse / r);
        m.re_mse_vs_ipw = ipw.filter(|r| *r > 0.0).map(|r| m.mse() / (r * r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(v: f64, se: Option<f64>) -> ReplicateOutcome {
        ReplicateOutcome::Estimate { value: v, se, restricted: false }
    }

    #[test]
    fn oracle_estimator_has_zero_bias() {
        let outs = vec![est(210.0, None); 50];
        let m = summarize("g", "oracle", "mean", 210.0, &outs, 0.95);
        assert_eq!(m.bias, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.sse, 0.0);
        assert_eq!(m.coverage, None);
        assert_eq!(m.rb_percent, Some(0.0));
    }

    #[test]
    fn rmse_decomposition() {
        let vals = [1.0, 2.5, -0.5, 4.0, 3.0, 0.25];
        let outs: Vec<_> = vals.iter().map(|&v| est(v, None)).collect();
        let m = summarize("g", "e", "mean", 1.0, &outs, 0.95);
        let k = vals.len() as f64;
        let lhs = m.rmse * m.rmse;
        let rhs = m.bias * m.bias + m.sse * m.sse * (k - 1.0) / k;
        assert!((lhs - rhs).abs() < 1e-12);
        // direct loops
        let mean = vals.iter().sum::<f64>() / k;
        assert!((m.bias - (mean - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn failures_counted_not_dropped_silently() {
        let outs = vec![est(1.0, Some(1.0)), ReplicateOutcome::Failed, est(3.0, Some(1.0))];
        let m = summarize("g", "e", "mean", 2.0, &outs, 0.95);
        assert_eq!(m.n_reps, 2);
        assert_eq!(m.failed_reps, 1);
        assert_eq!(m.coverage, Some(1.0));
        assert_eq!(m.mean_se, Some(1.0));
    }

    #[test]
    fn coverage_uses_wald_half_width() {
        // 1.96 se boundary: 1.5 away with se 1 covered, 2.5 away not
        let outs = vec![est(1.5, Some(1.0)), est(-2.5, Some(1.0)), est(0.0, Some(1.0)), est(0.1, Some(1.0))];
        let m = summarize("g", "e", "mean", 0.0, &outs, 0.95);
        assert_eq!(m.coverage, Some(0.75));
    }

    #[test]
    fn relative_efficiency_columns() {
        let a = summarize("g", "ols", "mean", 0.0, &[est(1.0, None), est(-1.0, None)], 0.95);
        let b = summarize("g", "ipw", "mean", 0.0, &[est(2.0, None), est(-2.0, None)], 0.95);
        let c = summarize("g", "cal", "mean", 0.0, &[est(0.5, None), est(-0.5, None)], 0.95);
        let t = McTable::new("t", vec![a, b, c]);
        let cal = t.row("g", "cal", "mean").unwrap();
        assert!((cal.re_rmse_vs_ols.unwrap() - 0.5).abs() < 1e-15);
        assert!((cal.re_mse_vs_ipw.unwrap() - 0.0625).abs() < 1e-15);
        assert_eq!(t.row("g", "ipw", "mean").unwrap().re_mse_vs_ipw, Some(1.0));
    }

    #[test]
    fn csv_and_markdown_render() {
        let a = summarize("g", "ols", "mean", 0.0, &[est(1.0, None), est(-1.0, None)], 0.95);
        let t = McTable::new("demo", vec![a]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &["seed: 1".into()]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# seed: 1\ngroup,estimator"));
        assert_eq!(s.lines().count(), 3);
        let md = t.to_markdown(&["seed: 1".into()]);
        assert!(md.contains("## demo"));
        assert!(md.contains("| g "));
    }
}
