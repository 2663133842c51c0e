//! Evaluation: confusion counts, threshold metrics, and the ROC/AUC
//! sweep. All metric math is over f64 regardless of model precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ForwardCtx, HybridModel};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        ConfusionMatrix { tp, fn_, tn, fp }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn record(&mut self, label: u8, predicted_positive: bool) {
        match (label == 1, predicted_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }
}

/// Threshold metrics. A ratio whose denominator is zero is reported as
/// 0.0 with the matching `*_undefined` flag set, rather than NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub sensitivity_undefined: bool,
    pub specificity_undefined: bool,
    pub precision_undefined: bool,
    pub f1_undefined: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::InsufficientData("empty confusion matrix".into()));
    }
    let mut m = Metrics {
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        sensitivity: 0.0,
        specificity: 0.0,
        precision: 0.0,
        f1: 0.0,
        sensitivity_undefined: false,
        specificity_undefined: false,
        precision_undefined: false,
        f1_undefined: false,
    };
    m.sensitivity = ratio(cm.tp, cm.tp + cm.fn_, &mut m.sensitivity_undefined);
    m.specificity = ratio(cm.tn, cm.tn + cm.fp, &mut m.specificity_undefined);
    m.precision = ratio(cm.tp, cm.tp + cm.fp, &mut m.precision_undefined);
    let denom = m.precision + m.sensitivity;
    if m.precision_undefined || m.sensitivity_undefined || denom == 0.0 {
        m.f1_undefined = true;
    } else {
        m.f1 = 2.0 * m.precision * m.sensitivity / denom;
    }
    Ok(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    /// (fpr, tpr) pairs from (0,0) to (1,1), one step per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Descending-threshold ROC sweep. Ties in score move the operating
/// point diagonally in a single step, which makes the trapezoid AUC
/// equal the Mann-Whitney U statistic with the ½-credit tie convention.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Usage("roc_curve needs matched scores and labels".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData("roc needs both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_fpr, mut prev_tpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        // absorb the whole tie group before emitting a point
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push((fpr, tpr));
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub auc: Option<f64>,
    /// Set when AUC was skipped because only one class was present.
    pub single_class: bool,
    pub mean_loss: f64,
}

/// Run the model over labeled examples at the given threshold.
pub fn evaluate<S: Scalar>(
    model: &HybridModel<S>,
    examples: &[Example<S>],
    threshold: f64,
) -> Result<(EvalReport, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("no evaluation examples".into()));
    }
    let mut ctx = ForwardCtx::inference();
    let mut cm = ConfusionMatrix::default();
    let mut scores = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for ex in examples {
        let (loss, prob) = model.loss(ex, &mut ctx)?;
        let p = prob.item().to_f64_lossy();
        cm.record(ex.label, p >= threshold);
        scores.push(p);
        labels.push(ex.label);
        loss_sum += loss.item().to_f64_lossy();
    }
    let roc = roc_curve(&scores, &labels);
    let (auc, single_class) = match roc {
        Ok(r) => (Some(r.auc), false),
        Err(Error::InsufficientData(_)) => (None, true),
        Err(e) => return Err(e),
    };
    let report = EvalReport {
        n: examples.len(),
        threshold,
        confusion: cm,
        metrics: metrics(&cm)?,
        auc,
        single_class,
        mean_loss: loss_sum / examples.len() as f64,
    };
    Ok((report, scores))
}

/// Brute-force Mann-Whitney probability that a random positive outranks
/// a random negative (ties count ½). Quadratic; used as the AUC oracle.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != 1)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientData("both classes required".into()));
    }
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(credit / (pos.len() * neg.len()) as f64)
}
