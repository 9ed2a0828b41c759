//! Classification metrics and attack-vs-normal ROC.

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The first point's threshold is `+inf`, stored as `null` in JSON.
    #[serde(with = "threshold")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Empty when the truth has no normal or no attack frames.
    pub roc: Vec<RocPoint>,
    pub auc: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

mod threshold {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Score multi-class predictions against `truth`. `attack_scores` holds
/// `1 - P(normal)` for every prediction; class 0 is normal.
pub fn evaluate(predicted: &[usize], attack_scores: &[f64], truth: &[usize], n_classes: usize) -> Result<EvaluationReport> {
    if predicted.len() != truth.len() || attack_scores.len() != truth.len() {
        return Err(PipelineError::LengthMismatch { predictions: predicted.len(), truth: truth.len() });
    }
    if let Some(&bad) = predicted.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(PipelineError::InvalidConfig(format!("class {bad} out of range for {n_classes} classes")));
    }
    let first = truth.first().copied();
    if first.is_none() || truth.iter().all(|&c| Some(c) == first) {
        return Err(PipelineError::DegenerateTruth);
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = (0..n_classes).map(|t| confusion[t][c]).sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassMetrics { precision, recall, f1, support }
        })
        .collect();
    let k = n_classes as f64;
    let binary: Vec<bool> = truth.iter().map(|&c| c != 0).collect();
    let (roc, auc) = roc_curve(attack_scores, &binary);
    Ok(EvaluationReport {
        n_samples: truth.len(),
        accuracy: ratio(correct, truth.len()),
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
        confusion,
        roc,
        auc,
        warnings: Vec::new(),
    })
}

/// ROC over every distinct score threshold, highest first, and the
/// trapezoid area under it. Tied scores move both rates at once, so the
/// area equals the pairwise concordance with ties counted as one half.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> (Vec<RocPoint>, Option<f64>) {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return (Vec::new(), None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one (positive, negative) pair.
    let mut area2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        points.push(RocPoint { threshold, fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 });
    }
    let auc = area2 as f64 / (2 * n_pos as u64 * n_neg as u64) as f64;
    (points, Some(auc))
}
