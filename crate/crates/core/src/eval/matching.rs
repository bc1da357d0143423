use std::cmp::Ordering;

use crate::data::BoxAnnotation;
use crate::geometry::Detection;

/// Outcome of matching one image's detections against its truths.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per input detection: `Some(truth index)` for a true positive.
    pub matched_truth: Vec<Option<usize>>,
    /// Truths no detection claimed.
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn is_true_positive(&self, detection: usize) -> bool {
        self.matched_truth[detection].is_some()
    }

    pub fn true_positives(&self) -> usize {
        self.matched_truth.iter().filter(|m| m.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.matched_truth.len() - self.true_positives()
    }
}

/// Greedy matching in probability order (stable for ties). Each detection
/// takes the unmatched same-class truth with the highest IoU, provided that
/// IoU reaches `iou_threshold`; every truth is matched at most once.
pub fn match_detections(detections: &[Detection], truths: &[BoxAnnotation], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .probability
            .partial_cmp(&detections[a].probability)
            .unwrap_or(Ordering::Equal)
    });
    let rects: Vec<_> = truths.iter().map(BoxAnnotation::rect).collect();
    let mut taken = vec![false; truths.len()];
    let mut matched_truth = vec![None; detections.len()];
    for d in order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if taken[t] || truth.class_id != det.class_id {
                continue;
            }
            let iou = det.rect.iou(&rects[t]);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((t, iou));
            }
        }
        if let Some((t, _)) = best {
            taken[t] = true;
            matched_truth[d] = Some(t);
        }
    }
    MatchResult {
        false_negatives: taken.iter().filter(|t| !**t).count(),
        matched_truth,
    }
}
