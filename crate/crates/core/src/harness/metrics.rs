use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dataio::Label;

/// Counts with broken as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn add(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tp: self.tp + other.tp,
        }
    }
}

pub fn confusion(predicted: &[Label], actual: &[Label]) -> Result<ConfusionMatrix, HarnessError> {
    if predicted.len() != actual.len() {
        return Err(HarnessError::Invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, a) in predicted.iter().zip(actual) {
        match (a, p) {
            (Label::Normal, Label::Normal) => cm.tn += 1,
            (Label::Normal, Label::Broken) => cm.fp += 1,
            (Label::Broken, Label::Normal) => cm.fn_ += 1,
            (Label::Broken, Label::Broken) => cm.tp += 1,
        }
    }
    Ok(cm)
}

/// Which ratios had a zero denominator (reported as 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undefined {
    pub precision: bool,
    pub recall: bool,
    pub f_score: bool,
    /// No actual negatives: `tn_rate` and `fp_rate` are undefined.
    pub negative_rates: bool,
}

impl Undefined {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f_score || self.negative_rates
    }

    fn merge(&self, o: &Undefined) -> Undefined {
        Undefined {
            precision: self.precision || o.precision,
            recall: self.recall || o.recall,
            f_score: self.f_score || o.f_score,
            negative_rates: self.negative_rates || o.negative_rates,
        }
    }
}

/// Scores as fractions in [0, 1]; tables render them as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tn_rate: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub tp_rate: f64,
    /// Broken share of the evaluated windows.
    pub prevalence: f64,
    pub undefined: Undefined,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, HarnessError> {
    let total = cm.total();
    if total == 0 {
        return Err(HarnessError::EmptyEvaluation);
    }
    let (precision, p_undef) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, r_undef) = ratio(cm.tp, cm.positives());
    let (tn_rate, n_undef) = ratio(cm.tn, cm.negatives());
    let (fp_rate, _) = ratio(cm.fp, cm.negatives());
    let (fn_rate, _) = ratio(cm.fn_, cm.positives());
    let f_undef = p_undef || r_undef || precision + recall == 0.0;
    let f_score = if f_undef {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        f_score,
        tn_rate,
        fp_rate,
        fn_rate,
        tp_rate: recall,
        prevalence: cm.positives() as f64 / total as f64,
        undefined: Undefined {
            precision: p_undef,
            recall: r_undef,
            f_score: f_undef,
            negative_rates: n_undef,
        },
    })
}

/// Arithmetic mean of each field; a flag is set if it is set in any report.
pub fn average(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricsReport {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f_score: mean(|r| r.f_score),
        tn_rate: mean(|r| r.tn_rate),
        fp_rate: mean(|r| r.fp_rate),
        fn_rate: mean(|r| r.fn_rate),
        tp_rate: mean(|r| r.tp_rate),
        prevalence: mean(|r| r.prevalence),
        undefined: reports.iter().fold(Undefined::default(), |acc, r| acc.merge(&r.undefined)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Broken as B, Normal as N};

    #[test]
    fn hand_counts() {
        let cm = confusion(&[N, B, N, B], &[N, N, B, B]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tn: 1, fp: 1, fn_: 1, tp: 1 });
        let cm = confusion(&[N, B, B], &[N, B, B]).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        assert!(confusion(&[N], &[]).is_err());
        assert_eq!(confusion(&[], &[]).unwrap().total(), 0);
    }

    #[test]
    fn hand_metrics() {
        let m = metrics(&ConfusionMatrix { tn: 97, fp: 1, fn_: 1, tp: 1 }).unwrap();
        for (v, e) in [(m.accuracy, 0.98), (m.precision, 0.5), (m.recall, 0.5), (m.f_score, 0.5)] {
            assert!((v - e).abs() < 1e-12);
        }
        let perfect = metrics(&ConfusionMatrix { tn: 40, fp: 0, fn_: 0, tp: 3 }).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f_score), (1.0, 1.0, 1.0, 1.0));
        assert!(!perfect.undefined.any());
        assert!(matches!(metrics(&ConfusionMatrix::default()), Err(HarnessError::EmptyEvaluation)));
    }

    #[test]
    fn undefined_ratios_are_zero_and_flagged() {
        let m = metrics(&ConfusionMatrix { tn: 10, fp: 0, fn_: 2, tp: 0 }).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.precision && m.undefined.f_score && !m.undefined.recall);
        let m = metrics(&ConfusionMatrix { tn: 10, fp: 1, fn_: 0, tp: 0 }).unwrap();
        assert!(m.undefined.recall);
    }

    #[test]
    fn averaging_is_fieldwise() {
        let a = metrics(&ConfusionMatrix { tn: 97, fp: 1, fn_: 1, tp: 1 }).unwrap();
        let b = metrics(&ConfusionMatrix { tn: 50, fp: 0, fn_: 0, tp: 2 }).unwrap();
        let m = average(&[a, b]).unwrap();
        assert!((m.accuracy - (a.accuracy + b.accuracy) / 2.0).abs() < 1e-15);
        assert!(average(&[]).is_none());
    }
}
