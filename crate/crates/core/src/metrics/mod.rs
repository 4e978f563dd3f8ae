//! Confusion matrices, per-class precision / recall / F1 and report output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ClassLabel;

/// Counts indexed `[true][predicted]`, classes ordered AD, MCI, CN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

/// One-vs-rest tallies of a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneVsRest {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(predictions: &[ClassLabel], truths: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("confusion matrix needs at least one sample"));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in predictions.iter().zip(truths) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    /// Number of samples whose true class is `class`.
    pub fn support(&self, class: ClassLabel) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn one_vs_rest(&self, class: ClassLabel) -> OneVsRest {
        let c = class.index();
        let tp = self.counts[c][c];
        let fp = (0..3).map(|t| self.counts[t][c]).sum::<u64>() - tp;
        let fn_ = self.support(class) - tp;
        OneVsRest {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `trace / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// One-vs-rest precision and recall; 0 where the denominator is 0.
pub fn precision_recall(cm: &ConfusionMatrix, class: ClassLabel) -> (f64, f64) {
    let o = cm.one_vs_rest(class);
    (ratio(o.tp, o.tp + o.fp), ratio(o.tp, o.tp + o.fn_))
}

/// Micro-averaged precision and recall, pooling the one-vs-rest tallies.
pub fn micro_precision_recall(cm: &ConfusionMatrix) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in ClassLabel::ALL {
        let o = cm.one_vs_rest(c);
        tp += o.tp;
        fp += o.fp;
        fn_ += o.fn_;
    }
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    let s = precision + recall;
    if s == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScore {
    pub label: ClassLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScore>,
    pub accuracy: f64,
    pub r#macro: MacroScore,
}

impl ClassMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let accuracy = accuracy(cm)?;
        let per_class: Vec<ClassScore> = ClassLabel::ALL
            .iter()
            .map(|&label| {
                let (precision, recall) = precision_recall(cm, label);
                ClassScore {
                    label,
                    precision,
                    recall,
                    f1: f1(precision, recall),
                }
            })
            .collect();
        let mean = |f: fn(&ClassScore) -> f64| per_class.iter().map(f).sum::<f64>() / 3.0;
        let r#macro = MacroScore {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        };
        Ok(ClassMetrics {
            per_class,
            accuracy,
            r#macro,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub dataset: String,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassScore>,
    pub accuracy: f64,
    pub r#macro: MacroScore,
    pub checkpoint: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// `SOURCE_DATE_EPOCH` when set, otherwise the current time.
pub fn report_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

impl EvalReport {
    pub fn new(
        dataset: impl Into<String>,
        confusion: ConfusionMatrix,
        checkpoint: impl Into<String>,
        timestamp: u64,
    ) -> Result<Self> {
        let m = ClassMetrics::from_confusion(&confusion)?;
        Ok(EvalReport {
            dataset: dataset.into(),
            confusion,
            per_class: m.per_class,
            accuracy: m.accuracy,
            r#macro: m.r#macro,
            checkpoint: checkpoint.into(),
            timestamp,
        })
    }

    /// Largest difference between the stored metrics and a recomputation
    /// from the embedded matrix.
    pub fn consistency_error(&self) -> Result<f64> {
        let m = ClassMetrics::from_confusion(&self.confusion)?;
        let mut err = (m.accuracy - self.accuracy).abs();
        if m.per_class.len() != self.per_class.len() {
            return Ok(f64::INFINITY);
        }
        for (a, b) in m.per_class.iter().zip(&self.per_class) {
            if a.label != b.label {
                return Ok(f64::INFINITY);
            }
            err = err
                .max((a.precision - b.precision).abs())
                .max((a.recall - b.recall).abs())
                .max((a.f1 - b.f1).abs());
        }
        Ok(err
            .max((m.r#macro.precision - self.r#macro.precision).abs())
            .max((m.r#macro.recall - self.r#macro.recall).abs())
            .max((m.r#macro.f1 - self.r#macro.f1).abs()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `label,precision,recall,f1,accuracy,support` with rows AD, MCI, CN
    /// and `overall` (macro scores, accuracy, total count). Class rows leave
    /// the accuracy column empty.
    pub fn to_csv(&self) -> Result<String> {
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "precision", "recall", "f1", "accuracy", "support"])
            .map_err(err)?;
        for c in &self.per_class {
            w.write_record([
                c.label.as_str().to_string(),
                c.precision.to_string(),
                c.recall.to_string(),
                c.f1.to_string(),
                String::new(),
                self.confusion.support(c.label).to_string(),
            ])
            .map_err(err)?;
        }
        w.write_record([
            "overall".to_string(),
            self.r#macro.precision.to_string(),
            self.r#macro.recall.to_string(),
            self.r#macro.f1.to_string(),
            self.accuracy.to_string(),
            self.confusion.total().to_string(),
        ])
        .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of strings"))
    }
}
