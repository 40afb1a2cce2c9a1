use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Area under the ROC curve: `(concordant + 0.5 ties) / (P N)` over all
/// positive/negative pairs.
pub fn auc<T: Scalar>(probabilities: &[T], targets: &[bool]) -> Result<f64> {
    if probabilities.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} probabilities for {} targets",
            probabilities.len(),
            targets.len()
        )));
    }
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    let key = |i: usize| probabilities[i].to_f64_lossy();
    if order.iter().any(|&i| key(i).is_nan()) {
        return Err(Error::UndefinedMetric("probability is NaN".into()));
    }
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let (mut concordant, mut ties, mut neg_below) = (0u128, 0u128, 0u128);
    let (mut pos_total, mut neg_total) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && key(order[j]) == key(order[i]) {
            if targets[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        concordant += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        i = j;
    }
    if pos_total == 0 || neg_total == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes, got {pos_total} positive and {neg_total} negative")));
    }
    Ok((2 * concordant + ties) as f64 / (2 * pos_total * neg_total) as f64)
}

/// Fraction of entries where `p >= threshold` agrees with the target.
pub fn accuracy<T: Scalar>(probabilities: &[T], targets: &[bool], threshold: f64) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() != targets.len() {
        return Err(Error::UndefinedMetric("accuracy needs matching non-empty inputs".into()));
    }
    let hits = probabilities.iter().zip(targets).filter(|(p, &t)| (p.to_f64_lossy() >= threshold) == t).count();
    Ok(hits as f64 / probabilities.len() as f64)
}
