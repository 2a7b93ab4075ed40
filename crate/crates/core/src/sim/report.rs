use std::io::Write;

use super::study::{RepRecord, SimulationReport};
use super::{estimator_label, Study};
use crate::error::Result;
use crate::numeric::pairwise_sum;

/// Aggregate performance of one estimator over all replications.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub estimator: String,
    /// Absolute value of the mean signed error of defined point estimates.
    pub bias: f64,
    pub mean_error: f64,
    /// Mean absolute error of defined point estimates.
    pub mae: f64,
    /// Mean length over bounded intervals; NaN if there were none.
    pub ci_length: f64,
    pub coverage: f64,
    pub reps: usize,
    /// Confidence sets that were not a bounded interval.
    pub n_unbounded: usize,
    /// Replications without a point estimate.
    pub n_undefined: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        pairwise_sum(v) / v.len() as f64
    }
}

pub(crate) fn summarize_records(estimators: &[String], records: &[RepRecord]) -> Vec<SummaryRow> {
    estimators
        .iter()
        .map(|name| {
            let rows: Vec<&RepRecord> = records.iter().filter(|r| &r.estimator == name).collect();
            let errors: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.estimate.map(|e| e - r.truth))
                .collect();
            let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
            let lengths: Vec<f64> = rows.iter().filter_map(|r| r.ci_length).collect();
            let covered = rows.iter().filter(|r| r.covered).count();
            SummaryRow {
                estimator: name.clone(),
                bias: mean(&errors).abs(),
                mean_error: mean(&errors),
                mae: mean(&abs),
                ci_length: mean(&lengths),
                coverage: covered as f64 / rows.len().max(1) as f64,
                reps: rows.len(),
                n_unbounded: rows.len() - lengths.len(),
                n_undefined: rows.len() - errors.len(),
            }
        })
        .collect()
}

/// Formats `x` to `digits` significant digits; non-finite values print as
/// `NaN`, `inf` or `-inf`.
pub fn format_sig(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..15).contains(&mag) {
        let decimals = (digits as i32 - 1 - mag).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{:.*e}", digits - 1, x)
    }
}

const CSV_HEADER: &str =
    "study,model,caliper,estimator,bias,ci_length,coverage,mean_error,mae,reps,n_unbounded,n_undefined,gate_rejections";

/// Renders the summary as CSV and as an aligned text table.
pub fn summarize(report: &SimulationReport) -> (String, String) {
    let cfg = &report.config;
    let model = match cfg.model {
        super::dgp::TreatmentModel::Logistic => "1",
        super::dgp::TreatmentModel::Selection => "2",
    };
    let caliper = if cfg.caliper { "on" } else { "off" };
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &report.summary {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            cfg.study.as_str(),
            model,
            caliper,
            r.estimator,
            format_sig(r.bias, 6),
            format_sig(r.ci_length, 6),
            format_sig(r.coverage, 6),
            format_sig(r.mean_error, 6),
            format_sig(r.mae, 6),
            r.reps,
            r.n_unbounded,
            r.n_undefined,
            report.gate_rejections,
        ));
    }

    let study = match cfg.study {
        Study::Ate => "average treatment effect",
        Study::Iv => "effect ratio",
    };
    let mut text = format!(
        "Model {model}, {study}, {} caliper: N = {}, {} replications, {} gate rejections\n",
        if cfg.caliper { "with" } else { "without" },
        cfg.n,
        cfg.reps,
        report.gate_rejections,
    );
    let width = report
        .summary
        .iter()
        .map(|r| estimator_label(&r.estimator).len())
        .max()
        .unwrap_or(0)
        .max("estimator".len());
    text.push_str(&format!(
        "{:<width$}  {:>10}  {:>10}  {:>10}\n",
        "estimator", "bias", "ci_length", "coverage"
    ));
    for r in &report.summary {
        text.push_str(&format!(
            "{:<width$}  {:>10.3}  {:>10.3}  {:>10.3}",
            estimator_label(&r.estimator),
            r.bias,
            r.ci_length,
            r.coverage
        ));
        if r.n_unbounded > 0 || r.n_undefined > 0 {
            text.push_str(&format!(
                "  ({} unbounded, {} undefined)",
                r.n_unbounded, r.n_undefined
            ));
        }
        text.push('\n');
    }
    (csv, text)
}

/// Writes one CSV row per replication and estimator.
pub fn write_replications<W: Write>(writer: W, records: &[RepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rep", "estimator", "attempts", "n_units", "truth", "estimate", "shape", "ci_lower", "ci_upper",
        "covered",
    ])?;
    for r in records {
        w.write_record([
            r.rep.to_string(),
            r.estimator.clone(),
            r.attempts.to_string(),
            r.n_units.to_string(),
            format!("{:?}", r.truth),
            r.estimate.map_or_else(String::new, |e| format!("{e:?}")),
            r.shape.to_string(),
            format_sig(r.ci_lower, 17),
            format_sig(r.ci_upper, 17),
            (r.covered as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
