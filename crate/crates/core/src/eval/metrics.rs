//! Ranking and overlap metrics: AUROC (ties count half), MAE, Dice with
//! the empty-vs-empty = 1 rule, and box mIoU.

use super::EvalError;
use crate::box3d::{iou_3d, Box3D};

/// Probability that a random positive outranks a random negative,
/// Mann-Whitney form with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank across the tie group
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Unweighted one-vs-rest mean over classes; every class in `0..classes`
/// must appear at least once.
pub fn macro_auroc(
    scores: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.is_empty() || classes < 2 {
        return Err(EvalError::SingleClass);
    }
    let mut total = 0.0;
    for c in 0..classes {
        let class_scores: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let class_labels: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += auroc(&class_scores, &class_labels)?;
    }
    Ok(total / classes as f64)
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch { left: predictions.len(), right: targets.len() });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput("mae"));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>()
        / predictions.len() as f64)
}

/// 2|P∩T| / (|P|+|T|); both masks empty counts as a perfect 1.0.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    let p: usize = pred.iter().filter(|&&v| v).count();
    let t: usize = truth.iter().filter(|&&v| v).count();
    if p + t == 0 {
        return Ok(1.0);
    }
    let inter = pred.iter().zip(truth).filter(|(&a, &b)| a && b).count();
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Per-class Dice over label maps (0 = background included as class 0),
/// plus the mean over classes.
pub fn dice_per_class(
    pred: &[u16],
    truth: &[u16],
    classes: usize,
) -> Result<(Vec<f64>, f64), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if classes == 0 {
        return Err(EvalError::BadConfig("dice over zero classes".into()));
    }
    let mut per = Vec::with_capacity(classes);
    for c in 0..classes as u16 {
        let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let t: Vec<bool> = truth.iter().map(|&v| v == c).collect();
        per.push(dice(&p, &t)?);
    }
    let mean = per.iter().sum::<f64>() / classes as f64;
    Ok((per, mean))
}

/// Mean intersection-over-union over aligned box pairs.
pub fn miou(preds: &[Box3D], truths: &[Box3D]) -> Result<f64, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { left: preds.len(), right: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput("miou"));
    }
    Ok(preds.iter().zip(truths).map(|(p, t)| iou_3d(p, t)).sum::<f64>() / preds.len() as f64)
}
