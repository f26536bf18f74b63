//! Confusion matrix and the accuracy / macro precision-recall-F1 report.

use crate::error::{Error, Result};

/// `K x K` counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Input(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Input(format!(
                "label pair ({truth}, {pred}) outside 0..{}",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Elementwise sum, for combining evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Input(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn column_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// TSV dump: header `true\pred` followed by predicted class ids.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("true\\pred");
        for p in 0..self.classes {
            out.push_str(&format!("\t{p}"));
        }
        out.push('\n');
        for t in 0..self.classes {
            out.push_str(&t.to_string());
            for p in 0..self.classes {
                out.push_str(&format!("\t{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy plus unweighted class means; a zero denominator scores 0 for that class.
pub fn derive_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 || cm.classes == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes)
        .map(|i| {
            let tp = cm.get(i, i);
            let precision = ratio(tp, cm.column_sum(i));
            let recall = ratio(tp, cm.row_sum(i));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.row_sum(i),
            }
        })
        .collect();
    let k = cm.classes as f64;
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        per_class,
    })
}

/// One report row: accuracy to 5 decimals, macro P/R/F1 to 2, fields separated by two spaces.
pub fn format_report(model: &str, epochs: usize, lr: f64, m: &Metrics) -> String {
    report_fields(model, epochs, lr, m).join("  ")
}

fn report_fields(model: &str, epochs: usize, lr: f64, m: &Metrics) -> [String; 7] {
    [
        model.to_string(),
        epochs.to_string(),
        lr.to_string(),
        format!("{:.5}", m.accuracy),
        format!("{:.2}", m.macro_precision),
        format!("{:.2}", m.macro_recall),
        format!("{:.2}", m.macro_f1),
    ]
}

const REPORT_COLUMNS: [&str; 7] = ["Model", "Epoch", "LR", "Accuracy", "Precision", "Recall", "F1-score"];

/// Left-aligned plain-text table with a header row.
pub fn format_table(rows: &[(&str, usize, f64, &Metrics)]) -> String {
    let mut cells: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for &(model, epochs, lr, m) in rows {
        cells.push(report_fields(model, epochs, lr, m).to_vec());
    }
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Report as TSV: header and one row per model (macro averages).
pub fn report_to_tsv(rows: &[(&str, usize, f64, &Metrics)]) -> String {
    let mut out = String::from("model\tepochs\tlr\taccuracy\tmacro_precision\tmacro_recall\tmacro_f1\n");
    for &(model, epochs, lr, m) in rows {
        out.push_str(&report_fields(model, epochs, lr, m).join("\t"));
        out.push('\n');
    }
    out
}

/// Per-class table as TSV.
pub fn per_class_to_tsv(m: &Metrics, class_names: &[String]) -> String {
    let mut out = String::from("class_id\tclass_name\tprecision\trecall\tf1\tsupport\n");
    for (i, c) in m.per_class.iter().enumerate() {
        let name = class_names.get(i).map(String::as_str).unwrap_or("");
        out.push_str(&format!(
            "{i}\t{name}\t{:.5}\t{:.5}\t{:.5}\t{}\n",
            c.precision, c.recall, c.f1, c.support
        ));
    }
    out
}
