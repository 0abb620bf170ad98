//! Confusion matrices and macro-averaged F1.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{bail, Result};
use crate::fusion::PredictionRecord;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            bail!(Shape, "{} counts for a {}x{} matrix", counts.len(), classes, classes);
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            bail!(Contract, "label pair ({}, {}) outside {} classes", truth, pred, self.classes);
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, pred)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    /// Header row of predicted labels, then one row per true label.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let label = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let mut out = String::from("truth\\pred");
        for j in 0..self.classes {
            out.push(',');
            out.push_str(&label(j));
        }
        out.push('\n');
        for i in 0..self.classes {
            out.push_str(&label(i));
            for j in 0..self.classes {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        bail!(Shape, "{} truth labels but {} predictions", truth.len(), pred.len());
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_f1(cm: &ConfusionMatrix) -> F1Report {
    let per_class: Vec<ClassScore> = (0..cm.classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassScore { precision, recall, f1, support: cm.row_sum(c) }
        })
        .collect();
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64
    };
    F1Report { per_class, macro_f1 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub confusion: ConfusionMatrix,
    pub report: F1Report,
}

/// Joins predictions to ground truth on clip id.
pub fn evaluate_fold<'a>(
    predictions: &[PredictionRecord],
    truth: impl IntoIterator<Item = (&'a str, usize)>,
    classes: usize,
) -> Result<FoldEvaluation> {
    let truth: HashMap<&str, usize> = truth.into_iter().collect();
    let mut cm = ConfusionMatrix::new(classes);
    for p in predictions {
        let Some(&label) = truth.get(p.clip_id()) else {
            bail!(Data, "prediction for unknown clip '{}'", p.clip_id());
        };
        cm.record(label, p.predicted)?;
    }
    let report = macro_f1(&cm);
    Ok(FoldEvaluation { confusion: cm, report })
}

/// Unweighted mean over folds, per class and overall.
pub fn average_folds(reports: &[F1Report]) -> Result<F1Report> {
    let Some(first) = reports.first() else {
        bail!(DegenerateInput, "no fold reports to average");
    };
    let c = first.per_class.len();
    if reports.iter().any(|r| r.per_class.len() != c) {
        bail!(Shape, "fold reports disagree on class count");
    }
    let k = reports.len() as f64;
    let per_class = (0..c)
        .map(|i| {
            let mean = |f: fn(&ClassScore) -> f64| reports.iter().map(|r| f(&r.per_class[i])).sum::<f64>() / k;
            ClassScore {
                precision: mean(|s| s.precision),
                recall: mean(|s| s.recall),
                f1: mean(|s| s.f1),
                support: reports.iter().map(|r| r.per_class[i].support).sum(),
            }
        })
        .collect();
    let macro_f1 = reports.iter().map(|r| r.macro_f1).sum::<f64>() / k;
    Ok(F1Report { per_class, macro_f1 })
}

/// Per-class F1 rows with one column per fold and an average column.
pub fn format_report(folds: &[(String, F1Report)], names: &[&str]) -> Result<String> {
    let reports: Vec<F1Report> = folds.iter().map(|(_, r)| r.clone()).collect();
    let avg = average_folds(&reports)?;
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(13);
    let mut out = format!("{:<width$}", "class");
    for (name, _) in folds {
        let _ = write!(out, " {name:>9}");
    }
    out.push_str("   Average\n");
    let pct = |v: f64| format!("{:>8.2}%", 100.0 * v);
    for i in 0..avg.per_class.len() {
        let label = names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let _ = write!(out, "{label:<width$}");
        for r in &reports {
            let _ = write!(out, " {}", pct(r.per_class[i].f1));
        }
        let _ = writeln!(out, " {}", pct(avg.per_class[i].f1));
    }
    let _ = write!(out, "{:<width$}", "Macro-average");
    for r in &reports {
        let _ = write!(out, " {}", pct(r.macro_f1));
    }
    let _ = writeln!(out, " {}", pct(avg.macro_f1));
    Ok(out)
}
