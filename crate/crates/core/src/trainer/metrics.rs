use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `(precision, recall, F1)` with every `0/0` taken as 0.
pub fn precision_recall_f1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Confusion matrix (rows are true classes) and the metrics derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// F1 of the attack class, for binary reports.
    pub attack_f1: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<Self> {
        let c = class_names.len();
        if truth.len() != predicted.len() {
            return Err(Error::Usage(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&y| y >= c) {
            return Err(Error::Usage(format!("class {bad} out of {c}")));
        }
        let mut confusion = vec![vec![0u64; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion, class_names)
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>, class_names: &[String]) -> Result<Self> {
        let c = class_names.len();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let support: u64 = confusion[k].iter().sum();
                let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
                let (precision, recall, f1) = precision_recall_f1(tp, predicted - tp, support - tp);
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let n: u64 = per_class.iter().map(|m| m.support).sum();
        let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let mut report = EvalReport {
            class_names: class_names.to_vec(),
            confusion,
            per_class,
            weighted_f1: 0.0,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            attack_f1: None,
        };
        report.weighted_f1 = if n == 0 { 0.0 } else { weighted_f1(&report)? };
        if c == 2 {
            report.attack_f1 = Some(report.per_class[1].f1);
        }
        Ok(report)
    }

    pub fn total(&self) -> u64 {
        self.per_class.iter().map(|m| m.support).sum()
    }

    /// Structured text: `key = value` header lines, then the confusion
    /// matrix and the per-class table as CSV blocks.
    pub fn to_text(&self, meta: &[(&str, String)]) -> String {
        let mut out = String::from("# evaluation report\n");
        for (k, v) in meta {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "samples = {}", self.total());
        let _ = writeln!(out, "accuracy = {}", self.accuracy);
        let _ = writeln!(out, "weighted_f1 = {}", self.weighted_f1);
        if let Some(f) = self.attack_f1 {
            let _ = writeln!(out, "attack_f1 = {f}");
        }
        out.push_str("\n[confusion_matrix]\ntrue\\predicted");
        for name in &self.class_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out.push_str("\n[per_class]\nclass,precision,recall,f1,support\n");
        for (name, m) in self.class_names.iter().zip(&self.per_class) {
            let _ = writeln!(out, "{name},{},{},{},{}", m.precision, m.recall, m.f1, m.support);
        }
        out
    }
}

/// Support-weighted mean of the per-class F1 scores.
pub fn weighted_f1(report: &EvalReport) -> Result<f64> {
    let n = report.total();
    if n == 0 {
        return Err(Error::Usage("weighted F1 of an empty evaluation".into()));
    }
    Ok(report
        .per_class
        .iter()
        .map(|m| m.support as f64 / n as f64 * m.f1)
        .sum())
}

/// Reads the `key = value` header of a report written by
/// [`EvalReport::to_text`].
pub fn parse_report_header(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .take_while(|l| !l.starts_with('['))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
