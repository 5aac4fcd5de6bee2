//! Binary classification metrics with Unstable as the positive class.

use serde::{Deserialize, Serialize};

use crate::audio::Label;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("input error: {0}")]
    InputError(String),
    #[error("ROC needs both classes present")]
    DegenerateLabels,
}

/// `[[TP, FN], [FP, TN]]`, rows actual, columns predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn tp(&self) -> u64 {
        self.0[0][0]
    }
    pub fn fn_(&self) -> u64 {
        self.0[0][1]
    }
    pub fn fp(&self) -> u64 {
        self.0[1][0]
    }
    pub fn tn(&self) -> u64 {
        self.0[1][1]
    }
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }
}

pub fn confusion_matrix(labels: &[Label], predictions: &[Label]) -> Result<Confusion, MetricsError> {
    if labels.len() != predictions.len() {
        return Err(MetricsError::InputError(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(MetricsError::InputError("no samples".into()));
    }
    let mut m = [[0u64; 2]; 2];
    for (a, p) in labels.iter().zip(predictions) {
        m[usize::from(!a.is_positive())][usize::from(!p.is_positive())] += 1;
    }
    Ok(Confusion(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when `TP + FP = 0` and precision was defined as 0.
    pub precision_undefined: bool,
    /// Set when `TP + FN = 0` and recall was defined as 0.
    pub recall_undefined: bool,
    /// Set when precision and recall are both 0 and F1 was defined as 0.
    pub f1_undefined: bool,
}

pub fn prf1(c: &Confusion) -> Result<Prf1, MetricsError> {
    let n = c.total();
    if n == 0 {
        return Err(MetricsError::InputError("confusion matrix is all zero".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_undefined) = ratio(c.tp(), c.tp() + c.fp());
    let (recall, recall_undefined) = ratio(c.tp(), c.tp() + c.fn_());
    let f1_undefined = precision + recall == 0.0;
    let f1 = if f1_undefined { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Prf1 {
        accuracy: (c.tp() + c.tn()) as f64 / n as f64,
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with score ≥ threshold are predicted positive. The leading
    /// point uses `+∞` (serialized as `null`) and the closing point `-∞`.
    #[serde(with = "opt_inf")]
    pub threshold: f64,
}

mod opt_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad threshold '{s}'"))),
        }
    }
}

/// Threshold sweep over the descending unique scores. Starts at (0,0) with a
/// sentinel threshold above every score and ends at (1,1).
pub fn roc_curve(labels: &[Label], scores: &[f64]) -> Result<Vec<RocPoint>, MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::InputError(format!("{} labels but {} scores", labels.len(), scores.len())));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MetricsError::InputError(format!("score {s} outside [0, 1]")));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let thr = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == thr {
            if labels[idx[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: thr });
    }
    let last = *roc.last().unwrap();
    if last.fpr != 1.0 || last.tpr != 1.0 {
        roc.push(RocPoint { fpr: 1.0, tpr: 1.0, threshold: f64::NEG_INFINITY });
    }
    Ok(roc)
}

/// Trapezoidal area under the curve.
pub fn auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub roc: Vec<RocPoint>,
    /// `None` when the evaluated set holds only one class.
    pub auc: Option<f64>,
    pub positive_class: Label,
    pub n_samples: u64,
}

/// Score is the Unstable probability; prediction is its argmax (ties go to Stable).
pub fn evaluate_scores(labels: &[Label], probs_unstable: &[f64], predictions: &[Label]) -> Result<EvalReport, MetricsError> {
    let confusion = confusion_matrix(labels, predictions)?;
    let m = prf1(&confusion)?;
    let (roc, auc) = match roc_curve(labels, probs_unstable) {
        Ok(r) => {
            let a = auc(&r);
            (r, Some(a))
        }
        Err(MetricsError::DegenerateLabels) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        confusion,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        precision_undefined: m.precision_undefined,
        recall_undefined: m.recall_undefined,
        roc,
        auc,
        positive_class: Label::Unstable,
        n_samples: confusion.total(),
    })
}

/// Build a report from `[B × 2]` softmax rows in class-index order.
pub fn evaluate_probs(labels: &[Label], probs: &[f32]) -> Result<EvalReport, MetricsError> {
    if probs.len() != labels.len() * 2 {
        return Err(MetricsError::InputError(format!("expected {} probabilities, got {}", labels.len() * 2, probs.len())));
    }
    let rows: Vec<&[f32]> = probs.chunks(2).collect();
    let scores: Vec<f64> = rows.iter().map(|r| (r[1] as f64).clamp(0.0, 1.0)).collect();
    let preds: Vec<Label> = rows.iter().map(|r| if r[1] > r[0] { Label::Unstable } else { Label::Stable }).collect();
    evaluate_scores(labels, &scores, &preds)
}
