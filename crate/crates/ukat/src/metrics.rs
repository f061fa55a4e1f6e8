//! Ranking and classification metrics.
//!
//! Average precision uses the positives-at-rank formulation: sort by score
//! descending with the original index as tiebreak, then average, over the
//! positive items only, the precision at each positive's rank. All
//! accumulation runs in f64.

use crate::error::{Error, Result};

/// Fraction of predictions equal to their reference.
pub fn accuracy(predicted: &[usize], reference: &[usize]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let hits = predicted.iter().zip(reference).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Average precision of one ranking. `None` when the class has no positive
/// items, since precision over an empty set has no meaning.
pub fn average_precision(scores: &[f32], relevant: &[bool]) -> Result<Option<f64>> {
    if scores.len() != relevant.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} relevance flags",
            scores.len(),
            relevant.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at index {i}")));
    }
    if !relevant.iter().any(|&r| r) {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut positives_seen = 0usize;
    let mut sum = 0.0f64;
    for (rank0, &i) in order.iter().enumerate() {
        if relevant[i] {
            positives_seen += 1;
            sum += positives_seen as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(Some(sum / positives_seen as f64))
}

/// Mean of per-class average precision over an `[n_items][n_classes]` score
/// matrix. Classes without a single positive item are left out of the mean;
/// if that empties it, the evaluation set cannot support the metric at all
/// and the call fails.
pub fn mean_average_precision(scores: &[Vec<f32>], relevant: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} relevance rows",
            scores.len(),
            relevant.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("mean average precision"));
    }
    let n_classes = scores[0].len();
    for (i, (s, r)) in scores.iter().zip(relevant).enumerate() {
        if s.len() != n_classes || r.len() != n_classes {
            return Err(Error::Shape(format!(
                "row {i} has {} scores and {} flags, expected {n_classes}",
                s.len(),
                r.len()
            )));
        }
    }
    if n_classes == 0 {
        return Err(Error::EmptyInput("mean average precision"));
    }
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    let mut column_scores = vec![0.0f32; scores.len()];
    let mut column_rel = vec![false; scores.len()];
    for c in 0..n_classes {
        for i in 0..scores.len() {
            column_scores[i] = scores[i][c];
            column_rel[i] = relevant[i][c];
        }
        if let Some(ap) = average_precision(&column_scores, &column_rel)? {
            sum += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "no class has a positive item, the metric is undefined".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// Fraction of decisions that are rejections (no keyword fired).
pub fn rejection_rate(fired: &[bool]) -> Result<f64> {
    if fired.is_empty() {
        return Err(Error::EmptyInput("rejection rate"));
    }
    let rejected = fired.iter().filter(|&&f| !f).count();
    Ok(rejected as f64 / fired.len() as f64)
}
