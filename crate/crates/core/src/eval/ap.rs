use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A scored detection already labelled true/false positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Labeled {
    pub confidence: f64,
    pub true_positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision/recall sweep over all distinct confidences plus its average
/// precision.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub num_truths: usize,
    pub iou_match_threshold: f64,
}

/// Builds the PR curve and all-point interpolated AP:
/// `AP = Σ (r_k − r_{k−1}) · max_{j ≥ k} p_j`.
///
/// Detections sharing a confidence form one operating point.
pub fn compute_pr_and_ap(labeled: &[Labeled], num_truths: usize) -> Result<PrCurve> {
    compute_pr_and_ap_at(labeled, num_truths, 0.5)
}

pub fn compute_pr_and_ap_at(labeled: &[Labeled], num_truths: usize, iou_match_threshold: f64) -> Result<PrCurve> {
    if num_truths == 0 {
        return Err(Error::data("average precision is undefined without ground truth"));
    }
    let mut sorted = labeled.to_vec();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal));
    let total = num_truths as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == c {
            if sorted[i].true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: c,
            recall: tp as f64 / total,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    Ok(PrCurve {
        points,
        ap,
        num_truths,
        iou_match_threshold,
    })
}
