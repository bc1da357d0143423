use std::cmp::Ordering;

use crate::geometry::Detection;

/// Total order used by NMS: probability descending, then box area
/// descending, then input position.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.probability
            .partial_cmp(&da.probability)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                db.rect
                    .area()
                    .partial_cmp(&da.rect.area())
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    order
}

/// Per-class greedy non-maximum suppression. A detection survives iff its
/// IoU with every already kept detection of the same class is
/// `≤ overlap_threshold`. Survivors are returned in rank order.
pub fn nms(detections: &[Detection], overlap_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in rank(detections) {
        let d = detections[i];
        let clear = kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| k.rect.iou(&d.rect) <= overlap_threshold);
        if clear {
            kept.push(d);
        }
    }
    kept
}
