//! Evaluation outputs and the cross-run results table.
//!
//! Plot data written by [`write_eval`]:
//!
//! | file | header |
//! |---|---|
//! | `scatter.csv` | `a,b,correct,regime` |
//! | `pred_vs_truth.csv` | `a,b,truth,pred,exact_match,truncated,class` |
//! | `answer_hist.csv` | `source,value,count` |
//! | `top_errors.csv` | `rank,error,count` |
//!
//! `pred` is empty for malformed outputs. `regime` is empty when the
//! dataset has no training square.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use addlab_core::eval::{self, ErrorCount, EvalReport, TaxonomyCounts};
use addlab_core::models::Architecture;
use addlab_core::taskgen::Interval;
use addlab_core::train::MeanSd;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsutil;
use crate::run::RunSummary;

/// Answer band the Transformer's predictions are expected to stay within.
pub const ANSWER_BAND: (u64, u64) = (1000, 3000);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub n: usize,
    pub em_percent: f64,
    pub answer_min: Option<String>,
    pub answer_max: Option<String>,
    pub fraction_in_answer_band: f64,
    pub taxonomy: TaxonomyCounts,
    pub plurality_error: Option<String>,
    pub top_errors: Vec<ErrorCount>,
}

impl EvalSummary {
    pub fn new(split: &str, report: &EvalReport) -> Self {
        Self {
            split: split.to_string(),
            n: report.n,
            em_percent: report.em_percent,
            answer_min: report.answer_min.as_ref().map(BigUint::to_string),
            answer_max: report.answer_max.as_ref().map(BigUint::to_string),
            fraction_in_answer_band: eval::fraction_within(&report.records, ANSWER_BAND.0, ANSWER_BAND.1),
            taxonomy: report.taxonomy,
            plurality_error: report.taxonomy.plurality_error().map(String::from),
            top_errors: report.top_errors.clone(),
        }
    }
}

#[derive(Serialize)]
struct ScatterRow {
    a: String,
    b: String,
    correct: bool,
    regime: Option<eval::Regime>,
}

#[derive(Serialize)]
struct PredRow<'a> {
    a: String,
    b: String,
    truth: String,
    pred: Option<String>,
    exact_match: bool,
    truncated: bool,
    class: &'a str,
}

#[derive(Serialize)]
struct HistRow<'a> {
    source: &'a str,
    value: String,
    count: usize,
}

#[derive(Serialize)]
struct ErrorRow {
    rank: usize,
    error: String,
    count: usize,
}

pub fn write_eval(dir: &Path, split: &str, report: &EvalReport, square: Option<Interval>) -> Result<EvalSummary> {
    let scatter = report.records.iter().map(|r| ScatterRow {
        a: r.a.to_string(),
        b: r.b.to_string(),
        correct: r.exact_match,
        regime: square.map(|sq| eval::regime(&r.a, &r.b, sq)),
    });
    fsutil::write_csv_with_header(&dir.join("scatter.csv"), &["a", "b", "correct", "regime"], scatter)?;

    let preds = report.records.iter().zip(&report.classes).map(|(r, c)| PredRow {
        a: r.a.to_string(),
        b: r.b.to_string(),
        truth: r.truth.to_string(),
        pred: r.pred_value.as_ref().map(BigUint::to_string),
        exact_match: r.exact_match,
        truncated: r.truncated,
        class: c.name(),
    });
    let header = ["a", "b", "truth", "pred", "exact_match", "truncated", "class"];
    fsutil::write_csv_with_header(&dir.join("pred_vs_truth.csv"), &header, preds)?;

    let mut truth: BTreeMap<&BigUint, usize> = BTreeMap::new();
    let mut pred: BTreeMap<&BigUint, usize> = BTreeMap::new();
    for r in &report.records {
        *truth.entry(&r.truth).or_default() += 1;
        if let Some(v) = &r.pred_value {
            *pred.entry(v).or_default() += 1;
        }
    }
    let hist = [("truth", truth), ("pred", pred)]
        .into_iter()
        .flat_map(|(source, m)| m.into_iter().map(move |(v, count)| HistRow { source, value: v.to_string(), count }).collect::<Vec<_>>());
    fsutil::write_csv_with_header(&dir.join("answer_hist.csv"), &["source", "value", "count"], hist)?;

    let errors = report.top_errors.iter().enumerate().map(|(i, e)| ErrorRow { rank: i + 1, error: e.error.to_string(), count: e.count });
    fsutil::write_csv_with_header(&dir.join("top_errors.csv"), &["rank", "error", "count"], errors)?;

    let summary = EvalSummary::new(split, report);
    fsutil::write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub architecture: Architecture,
    pub param_count: usize,
    pub trials: usize,
    pub completed: usize,
    pub val_em: Option<MeanSd>,
    pub test_em: Option<MeanSd>,
}

impl From<&RunSummary> for TableRow {
    fn from(s: &RunSummary) -> Self {
        Self { architecture: s.architecture, param_count: s.param_count, trials: s.trials, completed: s.completed, val_em: s.val_em, test_em: s.test_em }
    }
}

/// Rows ordered MLP, Seq2seq, Transformer; runs of one architecture keep
/// their given order.
pub fn table_rows(summaries: &[RunSummary]) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = summaries.iter().map(TableRow::from).collect();
    rows.sort_by_key(|r| r.architecture);
    rows
}

pub fn format_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

fn format_em(m: Option<MeanSd>) -> String {
    match m {
        Some(m) => format!("{:.2} ± {:.2}", m.mean, m.sd),
        None => "n/a".into(),
    }
}

pub fn render_table(rows: &[TableRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| [r.architecture.display_name().to_string(), format_params(r.param_count), format_em(r.val_em), format_em(r.test_em)])
        .collect();
    let head = ["Model", "Parameter", "Validation EM", "Test EM"].map(String::from);
    let mut widths = head.clone().map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&head).chain(&cells) {
        let line: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count()))).collect();
        writeln!(out, "{}", line.join(" | ").trim_end()).unwrap();
        if std::ptr::eq(row, &head) {
            writeln!(out, "{}", widths.map(|w| "-".repeat(w)).join("-|-")).unwrap();
        }
    }
    out
}

#[derive(Serialize)]
struct TableCsvRow {
    model: &'static str,
    parameters: usize,
    trials: usize,
    completed: usize,
    val_em_mean: Option<f64>,
    val_em_sd: Option<f64>,
    test_em_mean: Option<f64>,
    test_em_sd: Option<f64>,
}

pub fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let rows = rows.iter().map(|r| TableCsvRow {
        model: r.architecture.display_name(),
        parameters: r.param_count,
        trials: r.trials,
        completed: r.completed,
        val_em_mean: r.val_em.map(|m| m.mean),
        val_em_sd: r.val_em.map(|m| m.sd),
        test_em_mean: r.test_em.map(|m| m.mean),
        test_em_sd: r.test_em.map(|m| m.sd),
    });
    fsutil::write_csv(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arch: Architecture, val: f64) -> RunSummary {
        RunSummary {
            architecture: arch,
            param_count: 3_178_255,
            trials: 2,
            completed: 2,
            failed: 0,
            val_em: Some(MeanSd { mean: val, sd: 0.5 }),
            test_em: None,
            records: vec![],
        }
    }

    #[test]
    fn rows_follow_architecture_order() {
        let runs = [row(Architecture::Transformer, 1.0), row(Architecture::Mlp, 2.0), row(Architecture::Seq2seq, 3.0)];
        let order: Vec<_> = table_rows(&runs).iter().map(|r| r.architecture).collect();
        assert_eq!(order, Architecture::ALL);
    }

    #[test]
    fn table_text() {
        let text = render_table(&table_rows(&[row(Architecture::Transformer, 85.99)]));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Model"));
        assert!(lines[2].contains("Transformer") && lines[2].contains("3.2M") && lines[2].contains("85.99 ± 0.50") && lines[2].contains("n/a"));
    }

    #[test]
    fn params_formatting() {
        assert_eq!(format_params(1_166_411), "1.2M");
        assert_eq!(format_params(3_174_927), "3.2M");
        assert_eq!(format_params(950), "950");
    }
}
