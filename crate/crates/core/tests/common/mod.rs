//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use boxdet::eval::Labeled;
use boxdet::geometry::{Detection, Rect};
use boxdet::tensor::Differentiable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rect(rng: &mut impl Rng) -> Rect {
    let x0 = rng.gen_range(0.0..0.8);
    let y0 = rng.gen_range(0.0..0.8);
    Rect::from_corners(x0, y0, x0 + rng.gen_range(0.02..0.5), y0 + rng.gen_range(0.02..0.5))
}

/// IoU by counting cell centres of an `n × n` raster over `[0, 1]²`.
/// Axis-aligned rectangles are products of intervals, so the 2-D count is
/// the product of the 1-D counts.
pub fn raster_iou(a: &Rect, b: &Rect, n: usize) -> f64 {
    // centres (i + ½)/n inside [lo, hi), counted without a loop
    let cells = |lo: f64, hi: f64| -> usize {
        let first = (lo * n as f64 - 0.5).ceil().clamp(0.0, n as f64);
        let end = (hi * n as f64 - 0.5).ceil().clamp(0.0, n as f64);
        (end - first).max(0.0) as usize
    };
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let area_a = cells(ax0, ax1) * cells(ay0, ay1);
    let area_b = cells(bx0, bx1) * cells(by0, by1);
    let inter = cells(ax0.max(bx0), ax1.min(bx1)) * cells(ay0.max(by0), ay1.min(by1));
    let union = area_a + area_b - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Textbook NMS: repeatedly keep the best remaining detection and delete
/// everything of its class overlapping it by more than `threshold`.
pub fn nms_reference(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let better = |a: &(usize, Detection), b: &(usize, Detection)| {
        let (ia, da) = a;
        let (ib, db) = b;
        if da.probability != db.probability {
            return da.probability > db.probability;
        }
        if da.rect.area() != db.rect.area() {
            return da.rect.area() > db.rect.area();
        }
        ia < ib
    };
    let mut pool: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for k in 1..pool.len() {
            if better(&pool[k], &pool[best]) {
                best = k;
            }
        }
        let (_, top) = pool.remove(best);
        pool.retain(|(_, d)| d.class_id != top.class_id || d.rect.iou(&top.rect) <= threshold);
        kept.push(top);
    }
    kept
}

/// All-point interpolated AP by threshold enumeration: for every distinct
/// confidence τ take precision/recall of the detections scoring ≥ τ, then
/// integrate `p(r) = max{precision(τ) : recall(τ) ≥ r}` over `r ∈ [0, 1]`.
pub fn ap_bruteforce(labeled: &[Labeled], num_truths: usize) -> f64 {
    let mut taus: Vec<f64> = labeled.iter().map(|l| l.confidence).collect();
    taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    taus.dedup();
    let ops: Vec<(f64, f64)> = taus
        .iter()
        .map(|&t| {
            let kept: Vec<&Labeled> = labeled.iter().filter(|l| l.confidence >= t).collect();
            let tp = kept.iter().filter(|l| l.true_positive).count() as f64;
            (tp / num_truths as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = ops.iter().map(|o| o.0).collect();
    recalls.push(0.0);
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    for w in recalls.windows(2) {
        let p = ops
            .iter()
            .filter(|o| o.0 >= w[1])
            .map(|o| o.1)
            .fold(0.0, f64::max);
        ap += (w[1] - w[0]) * p;
    }
    ap
}

/// Random labelled detections with confidences drawn from a small lattice
/// so ties occur.
pub fn random_labeled(rng: &mut impl Rng) -> (Vec<Labeled>, usize) {
    let n = rng.gen_range(0..25);
    let labeled: Vec<Labeled> = (0..n)
        .map(|_| Labeled {
            confidence: rng.gen_range(0..40) as f64 / 40.0,
            true_positive: rng.gen_bool(0.5),
        })
        .collect();
    let tps = labeled.iter().filter(|l| l.true_positive).count();
    (labeled, tps + rng.gen_range(0..4).max(usize::from(tps == 0)))
}

pub fn random_detections(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            class_id: rng.gen_range(0..classes),
            rect: Rect::new(
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ),
            probability: rng.gen_range(0.0f32..1.0),
        })
        .collect()
}

/// Best partition of `shapes` into `k` non-empty groups whose centroids are
/// the member means, scored by mean `1 − IoU(shape, centroid)`. Returns the
/// cost and the centroids.
pub fn best_partition(shapes: &[(f64, f64)], k: usize) -> (f64, Vec<(f64, f64)>) {
    let n = shapes.len();
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, Vec::new());
    loop {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (s, &l) in shapes.iter().zip(&labels) {
            sums[l].0 += s.0;
            sums[l].1 += s.1;
            sums[l].2 += 1;
        }
        if sums.iter().all(|s| s.2 > 0) {
            let cost: f64 = shapes
                .iter()
                .zip(&labels)
                .map(|(s, &l)| {
                    let c = (sums[l].0 / sums[l].2 as f64, sums[l].1 / sums[l].2 as f64);
                    1.0 - Rect::shape_iou(s.0, s.1, c.0, c.1)
                })
                .sum();
            if cost / (n as f64) < best.0 {
                let means = sums.iter().map(|s| (s.0 / s.2 as f64, s.1 / s.2 as f64)).collect();
                best = (cost / n as f64, means);
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// A scalar objective over a flat `f64` vector given by closures.
pub struct Probe<F, G> {
    pub params: Vec<f64>,
    pub value: F,
    pub grad: G,
}

impl<F, G> Differentiable for Probe<F, G>
where
    F: FnMut(&[f64]) -> (f64, u64),
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn param(&self, i: usize) -> f64 {
        self.params[i]
    }

    fn set_param(&mut self, i: usize, value: f64) {
        self.params[i] = value;
    }

    fn evaluate(&mut self) -> (f64, u64) {
        (self.value)(&self.params)
    }

    fn gradient(&mut self) -> Vec<f64> {
        (self.grad)(&self.params)
    }
}

pub fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// FNV-1a over booleans / small integers, for branch signatures.
pub fn signature(items: impl IntoIterator<Item = u64>) -> u64 {
    items.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, v| {
        (h ^ v).wrapping_mul(0x0100_0000_01b3)
    })
}
