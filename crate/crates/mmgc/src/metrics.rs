//! Classification metrics: accuracy, macro precision/recall/F1, and
//! per-class recall, plus mean/std aggregation across trials.

use serde::{Deserialize, Serialize};

/// Per-class recall keyed by the clinical class names.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassRecall {
    #[serde(rename = "VCD")]
    pub vcd: f64,
    #[serde(rename = "GC")]
    pub gc: f64,
}

/// One evaluation's metric suite. Macro values are unweighted means over
/// the two classes; a class with zero support or zero predicted positives
/// contributes 0 to its macro term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub recall_per_class: PerClassRecall,
}

impl MetricsReport {
    pub fn fields(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.recall_per_class.vcd,
            self.recall_per_class.gc,
        ]
    }

    fn from_fields(f: [f64; 6]) -> MetricsReport {
        MetricsReport {
            accuracy: f[0],
            precision: f[1],
            recall: f[2],
            f1: f[3],
            recall_per_class: PerClassRecall { vcd: f[4], gc: f[5] },
        }
    }

    pub fn zeros() -> MetricsReport {
        Self::from_fields([0.0; 6])
    }
}

/// Computes the full metric suite from argmax predictions and labels.
pub fn metrics_from_predictions(predictions: &[usize], labels: &[usize]) -> MetricsReport {
    assert_eq!(predictions.len(), labels.len());
    if predictions.is_empty() {
        return MetricsReport::zeros();
    }
    let total = predictions.len() as f64;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64;

    let mut precision = [0.0f64; 2];
    let mut recall = [0.0f64; 2];
    let mut f1 = [0.0f64; 2];
    for class in 0..2 {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == class && **l == class)
            .count() as f64;
        let predicted = predictions.iter().filter(|p| **p == class).count() as f64;
        let support = labels.iter().filter(|l| **l == class).count() as f64;
        precision[class] = if predicted > 0.0 { tp / predicted } else { 0.0 };
        recall[class] = if support > 0.0 { tp / support } else { 0.0 };
        f1[class] = if precision[class] + recall[class] > 0.0 {
            2.0 * precision[class] * recall[class] / (precision[class] + recall[class])
        } else {
            0.0
        };
    }

    MetricsReport {
        accuracy: correct / total,
        precision: (precision[0] + precision[1]) / 2.0,
        recall: (recall[0] + recall[1]) / 2.0,
        f1: (f1[0] + f1[1]) / 2.0,
        recall_per_class: PerClassRecall { vcd: recall[0], gc: recall[1] },
    }
}

/// Mean and population standard deviation of each metric across trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

pub fn summarize(reports: &[MetricsReport]) -> MetricsSummary {
    assert!(!reports.is_empty());
    let n = reports.len() as f64;
    let mut mean = [0.0f64; 6];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.fields()) {
            *m += v / n;
        }
    }
    let mut var = [0.0f64; 6];
    for r in reports {
        for ((v, m), x) in var.iter_mut().zip(mean).zip(r.fields()) {
            *v += (x - m) * (x - m) / n;
        }
    }
    MetricsSummary {
        mean: MetricsReport::from_fields(mean),
        std: MetricsReport::from_fields(var.map(f64::sqrt)),
    }
}
