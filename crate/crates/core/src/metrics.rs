//! Accuracy, macro-F1 and weighted-F1 from a confusion matrix, plus
//! multi-run averaging and the Table-style CSV rows.

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_f1: Vec<f64>,
    pub n_samples: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square and non-empty".into()));
        }
        let n: u64 = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::EmptySplit("no samples to score".into()));
        }
        let mut per_class_f1 = Vec::with_capacity(c);
        let mut weighted = 0.0;
        let mut correct = 0;
        for k in 0..c {
            let tp = confusion[k][k];
            let support: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
            correct += tp;
            let precision = ratio(tp as f64, predicted as f64);
            let recall = ratio(tp as f64, support as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            weighted += support as f64 / n as f64 * f1;
            per_class_f1.push(f1);
        }
        Ok(Self {
            accuracy: correct as f64 / n as f64,
            macro_f1: per_class_f1.iter().sum::<f64>() / c as f64,
            weighted_f1: weighted,
            confusion,
            per_class_f1,
            n_samples: n,
        })
    }

    /// Scores predictions over a label space of `num_classes` classes. Classes
    /// absent from both vectors still count toward the macro average (F1 = 0).
    pub fn from_predictions(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != preds.len() {
            return Err(Error::Dimension(format!(
                "{} labels vs {} predictions",
                labels.len(),
                preds.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(preds) {
            for v in [y, p] {
                if v >= num_classes {
                    return Err(Error::LabelOutOfRange { label: v, num_classes });
                }
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

const EVAL_CHUNK: usize = 256;

/// Predicts every record of `split` and scores the predictions.
pub fn evaluate(model: &Model, split: &DatasetSplit) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit(format!(
            "`{}` split has no records",
            split.split_name
        )));
    }
    if split.num_classes != model.spec().num_classes {
        return Err(Error::Dimension(format!(
            "model has {} classes, split has {}",
            model.spec().num_classes,
            split.num_classes
        )));
    }
    let mut labels = Vec::with_capacity(split.len());
    let mut preds = Vec::with_capacity(split.len());
    for chunk in split.records.chunks(EVAL_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        for (rec, logits) in chunk.iter().zip(model.batch_logits(&refs)?) {
            labels.push(rec.label);
            preds.push(crate::model::argmax(&logits));
        }
    }
    MetricsReport::from_predictions(&labels, &preds, split.num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// Per-run reports and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<MetricsReport>,
    pub mean: MeanMetrics,
}

impl MultiRunReport {
    pub fn from_runs(runs: Vec<MetricsReport>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidConfig("at least one run is required".into()))?;
        let k = runs.len() as f64;
        let c = first.per_class_f1.len();
        let mean = MeanMetrics {
            accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / k,
            macro_f1: runs.iter().map(|r| r.macro_f1).sum::<f64>() / k,
            weighted_f1: runs.iter().map(|r| r.weighted_f1).sum::<f64>() / k,
            per_class_f1: (0..c)
                .map(|j| runs.iter().map(|r| r.per_class_f1[j]).sum::<f64>() / k)
                .collect(),
        };
        Ok(Self { runs, mean })
    }
}

pub const CSV_HEADER: &str = "variant,task,run,accuracy,macro_f1,weighted_f1";

/// One CSV row with the three headline metrics as percentages, two decimals.
pub fn csv_row(variant: &str, task: u8, run: &str, accuracy: f64, macro_f1: f64, weighted_f1: f64) -> String {
    format!(
        "{variant},{task},{run},{:.2},{:.2},{:.2}",
        accuracy * 100.0,
        macro_f1 * 100.0,
        weighted_f1 * 100.0
    )
}

/// Per-run rows followed by the `mean` row.
pub fn csv_rows(variant: &str, task: u8, report: &MultiRunReport) -> Vec<String> {
    let mut rows: Vec<String> = report
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| csv_row(variant, task, &i.to_string(), r.accuracy, r.macro_f1, r.weighted_f1))
        .collect();
    let m = &report.mean;
    rows.push(csv_row(variant, task, "mean", m.accuracy, m.macro_f1, m.weighted_f1));
    rows
}
