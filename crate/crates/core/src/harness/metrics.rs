//! Slide-level classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SagError};

/// Accuracy plus macro-averaged precision, recall and one-vs-rest AUC.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Area under the ROC curve by the trapezoid rule over distinct score
/// thresholds; tied scores form one step. `None` unless both classes occur.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp as f64 / n_pos as f64, fp as f64 / n_neg as f64);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        (prev_tpr, prev_fpr) = (tpr, fpr);
    }
    Some(area)
}

/// `probs[i]` holds the class scores of sample `i`. Classes absent from
/// `labels` are left out of the macro averages with a warning; precision of
/// a class that is never predicted counts as 0.
pub fn classification_metrics(labels: &[usize], probs: &[Vec<f64>], num_classes: usize) -> Result<ClassMetrics> {
    if labels.is_empty() || labels.len() != probs.len() {
        return Err(SagError::shape(format!("{} score rows", labels.len()), probs.len()));
    }
    if let Some(bad) = probs.iter().find(|p| p.len() != num_classes) {
        return Err(SagError::shape(num_classes, bad.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(SagError::Bounds { index: l, len: num_classes });
    }
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let correct = labels.iter().zip(&pred).filter(|(l, p)| l == p).count();
    let (mut p_sum, mut r_sum, mut auc_sum) = (0.0, 0.0, 0.0);
    let (mut present, mut auc_n) = (0usize, 0usize);
    for c in 0..num_classes {
        let support = labels.iter().filter(|&&l| l == c).count();
        if support == 0 {
            log::warn!("class {c} absent from evaluation set; excluded from macro averages");
            continue;
        }
        present += 1;
        let tp = labels.iter().zip(&pred).filter(|&(&l, &p)| l == c && p == c).count();
        let predicted = pred.iter().filter(|&&p| p == c).count();
        p_sum += if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        r_sum += tp as f64 / support as f64;
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = roc_auc(&scores, &positive) {
            auc_sum += a;
            auc_n += 1;
        }
    }
    Ok(ClassMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        precision: p_sum / present as f64,
        recall: r_sum / present as f64,
        auc: if auc_n == 0 { f64::NAN } else { auc_sum / auc_n as f64 },
    })
}
