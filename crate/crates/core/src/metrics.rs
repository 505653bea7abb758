//! Average precision and accuracy for binary "looking" scores.

use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(alloc::format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, ties in input order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Non-interpolated average precision of the positive class.
///
/// Returns `Ok(None)` when there are no positive labels, since AP is
/// undefined there.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / n_pos as f64))
}

/// Mean of the per-class APs, scoring the negative class with `1 - score`.
pub fn macro_average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    let pos = average_precision(scores, labels)?;
    let inv_scores: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    let inv_labels: Vec<u8> = labels.iter().map(|&l| 1 - l.min(1)).collect();
    let neg = average_precision(&inv_scores, &inv_labels)?;
    Ok(match (pos, neg) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    })
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApVariant {
    /// AP of the "looking" class.
    Positive,
    /// Mean AP over both classes.
    Macro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `None` when undefined (no positives).
    pub map: Option<f64>,
    pub accuracy: f64,
    pub n_samples: usize,
    pub threshold: f64,
    pub variant: ApVariant,
}

pub fn score(scores: &[f64], labels: &[u8], threshold: f64, variant: ApVariant) -> Result<MetricsReport> {
    let map = match variant {
        ApVariant::Positive => average_precision(scores, labels)?,
        ApVariant::Macro => macro_average_precision(scores, labels)?,
    };
    Ok(MetricsReport {
        map,
        accuracy: accuracy(scores, labels, threshold)?,
        n_samples: scores.len(),
        threshold,
        variant,
    })
}
