//! Confusion-based benchmark metrics and CHAIR-style caption metrics.
//!
//! All rates are percentages at full precision; a metric whose denominator is
//! zero is `None`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harvest::InferenceRecord;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, label: bool, predicted: bool) {
        match (label, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tnr: Option<f64>,
    pub pbo: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn popev2_metrics(c: &ConfusionCounts) -> PopeMetrics {
    let total = c.total();
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    PopeMetrics {
        accuracy: ratio(c.tp + c.tn, total),
        precision,
        recall,
        f1,
        tnr: ratio(c.tn, c.tn + c.fp),
        pbo: ratio(c.tp + c.fp, total).map(|p| p - 50.0),
    }
}

/// Harmonic mean of two percentages.
pub fn f1_from(precision: f64, recall: f64) -> Option<f64> {
    (precision + recall > 0.0).then(|| 2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenEvalCounts {
    pub responses_total: u64,
    pub responses_hallucinated: u64,
    pub mentions_total: u64,
    pub mentions_hallucinated: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub counts: GenEvalCounts,
    pub resp_rate: f64,
    pub mention_rate: Option<f64>,
}

pub fn chair_metrics(records: &[InferenceRecord], vocab: &Vocab) -> Result<ChairReport> {
    if records.is_empty() {
        return Err(Error::Precondition("no captions to score".into()));
    }
    let mut c = GenEvalCounts::default();
    for r in records {
        c.responses_total += 1;
        if !r.hallucinated.is_empty() {
            c.responses_hallucinated += 1;
        }
        for class in r.prediction.iter().filter_map(|&t| vocab.token_class(t)) {
            c.mentions_total += 1;
            if r.hallucinated.contains(&class) {
                c.mentions_hallucinated += 1;
            }
        }
    }
    Ok(ChairReport {
        counts: c,
        resp_rate: 100.0 * c.responses_hallucinated as f64 / c.responses_total as f64,
        mention_rate: ratio(c.mentions_hallucinated, c.mentions_total),
    })
}
