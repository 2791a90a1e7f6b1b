//! Link-prediction metrics: average precision and ROC-AUC.

use std::cmp::Ordering;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("no predictions")]
    Empty,
    #[error("average precision needs at least one positive")]
    NoPositives,
    #[error("ROC-AUC needs both classes")]
    SingleClass,
    #[error("score is NaN")]
    NanScore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPrediction<S> {
    pub score: S,
    pub label: bool,
}

impl<S: Scalar> ScoredPrediction<S> {
    pub fn new(score: S, label: bool) -> Self {
        Self { score, label }
    }
}

pub fn zip_predictions<S: Scalar>(scores: &[S], labels: &[bool]) -> Vec<ScoredPrediction<S>> {
    scores
        .iter()
        .zip(labels)
        .map(|(&score, &label)| ScoredPrediction { score, label })
        .collect()
}

fn sorted_desc<S: Scalar>(preds: &[ScoredPrediction<S>]) -> Result<Vec<ScoredPrediction<S>>, MetricError> {
    if preds.iter().any(|p| p.score.is_nan()) {
        return Err(MetricError::NanScore);
    }
    let mut v = preds.to_vec();
    v.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(v)
}

/// Step-interpolated average precision, `Σ (R_k − R_{k−1}) · P_k` over the
/// distinct score thresholds. Tied scores enter as one block.
pub fn average_precision<S: Scalar>(preds: &[ScoredPrediction<S>]) -> Result<f64, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let positives = preds.iter().filter(|p| p.label).count();
    if positives == 0 {
        return Err(MetricError::NoPositives);
    }
    let sorted = sorted_desc(preds)?;
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            tp += usize::from(sorted[i].label);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mann–Whitney form of ROC-AUC with half credit for ties, via average ranks.
pub fn roc_auc<S: Scalar>(preds: &[ScoredPrediction<S>]) -> Result<f64, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let pos = preds.iter().filter(|p| p.label).count();
    let neg = preds.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut sorted = sorted_desc(preds)?;
    sorted.reverse();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        let start = i;
        while i < sorted.len() && sorted[i].score == s {
            i += 1;
        }
        // 1-based ranks start+1 ..= i share their mean.
        let avg = (start + 1 + i) as f64 / 2.0;
        let block_pos = sorted[start..i].iter().filter(|p| p.label).count();
        rank_sum += avg * block_pos as f64;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(scores: &[f64], labels: &[u8]) -> Vec<ScoredPrediction<f64>> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredPrediction::new(s, l == 1))
            .collect()
    }

    #[test]
    fn worked_example() {
        let p = preds(&[0.9, 0.8, 0.3], &[1, 0, 1]);
        assert!((average_precision(&p).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(roc_auc(&p).unwrap(), 0.5);
    }

    #[test]
    fn perfect_and_degenerate() {
        let p = preds(&[0.9, 0.7, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(average_precision(&p).unwrap(), 1.0);
        assert_eq!(roc_auc(&p).unwrap(), 1.0);
        assert_eq!(average_precision(&preds(&[0.4], &[1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&preds(&[0.5; 4], &[1, 0, 1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn error_paths() {
        assert_eq!(average_precision(&preds(&[0.1, 0.2], &[0, 0])), Err(MetricError::NoPositives));
        assert_eq!(roc_auc(&preds(&[0.1, 0.2], &[1, 1])), Err(MetricError::SingleClass));
        assert_eq!(average_precision::<f64>(&[]), Err(MetricError::Empty));
        assert_eq!(roc_auc(&preds(&[f64::NAN, 0.2], &[1, 0])), Err(MetricError::NanScore));
    }

    #[test]
    fn tied_block_ap() {
        // One block holding 1 positive of 2 → AP = 1 · 0.5
        let p = preds(&[0.5, 0.5], &[1, 0]);
        assert_eq!(average_precision(&p).unwrap(), 0.5);
    }
}
