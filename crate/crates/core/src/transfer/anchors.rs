use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Rect;

const MAX_ITERATIONS: usize = 100;
const RESTARTS: usize = 24;
const FULL_POLISH_LIMIT: usize = 64;

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - Rect::shape_iou(a.0, a.1, b.0, b.1)
}

fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (j, &c) in centroids.iter().enumerate().skip(1) {
        if distance(b, c) < distance(b, centroids[best]) {
            best = j;
        }
    }
    best
}

/// Mean `1 − IoU` between each box and its closest anchor (same units).
pub fn mean_distortion(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    boxes
        .iter()
        .map(|&b| distance(b, anchors[nearest(b, anchors)]))
        .sum::<f64>()
        / boxes.len() as f64
}

/// Clusters normalized `(w, h)` shapes into `k` anchors with k-means under
/// the `1 − IoU` distance of co-centered boxes, and returns them in grid
/// cells (`× grid`), sorted by area.
///
/// The first run starts from the largest box, each further centroid being
/// the box farthest from those chosen so far. Further runs use starts drawn
/// from `seed` with probability growing with distance to the chosen set.
/// Runs are polished by moving single boxes between groups while the total
/// distance to the group means drops, and anchors are the group means. On
/// small sets every run is polished, along with the raw starts and random
/// partitions, and the cheapest wins; on larger sets only the best Lloyd
/// run is polished. Ties go to the first run.
///
/// With fewer than `k` distinct shapes the distinct set is repeated to
/// length `k` and a warning is logged.
pub fn estimate_anchors(boxes: &[(f32, f32)], k: usize, grid: f32, seed: u64) -> Result<Vec<(f32, f32)>> {
    if k == 0 {
        return Err(Error::config("anchor count must be at least 1"));
    }
    if boxes.is_empty() {
        return Err(Error::data("no boxes to estimate anchors from"));
    }
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0 && b.0.is_finite() && b.1.is_finite())) {
        return Err(Error::data(format!("box shape {}x{} is not positive", b.0, b.1)));
    }
    // Canonical order makes the result independent of input order.
    let mut points: Vec<(f64, f64)> = boxes.iter().map(|&(w, h)| (w as f64, h as f64)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut distinct = points.clone();
    distinct.dedup();

    let centroids = if distinct.len() < k {
        log::warn!(
            "only {} distinct box shapes for {k} anchors, duplicating the distinct set",
            distinct.len()
        );
        distinct.iter().cycle().take(k).copied().collect()
    } else {
        kmeans(&points, &distinct, k, seed)
    };

    let mut out: Vec<(f64, f64)> = centroids;
    out.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    Ok(out
        .into_iter()
        .map(|(w, h)| ((w * grid as f64) as f32, (h * grid as f64) as f32))
        .collect())
}

fn kmeans(points: &[(f64, f64)], distinct: &[(f64, f64)], k: usize, seed: u64) -> Vec<(f64, f64)> {
    let area = |p: &(f64, f64)| p.0 * p.1;
    let mut largest = distinct[0];
    for p in distinct {
        if area(p) > area(&largest) {
            largest = *p;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = lloyd(points, farthest_from(distinct, vec![largest], k), &mut rng);
    if points.len() > FULL_POLISH_LIMIT {
        let mut best = first;
        let mut best_cost = mean_distortion(points, &best);
        for _ in 0..RESTARTS {
            let settled = lloyd(points, weighted_start(distinct, k, &mut rng), &mut rng);
            let cost = mean_distortion(points, &settled);
            if cost < best_cost {
                best = settled;
                best_cost = cost;
            }
        }
        let (polished, cost) = refine(points, nearest_labels(points, &best), &best);
        return if cost <= best_cost { polished } else { best };
    }

    let (mut best, mut best_cost) = refine(points, nearest_labels(points, &first), &first);
    let mut consider = |labels: Vec<usize>, fallback: &[(f64, f64)]| {
        let (candidate, cost) = refine(points, labels, fallback);
        if cost < best_cost {
            best = candidate;
            best_cost = cost;
        }
    };
    for _ in 0..RESTARTS {
        let start = weighted_start(distinct, k, &mut rng);
        let settled = lloyd(points, start.clone(), &mut rng);
        consider(nearest_labels(points, &start), &start);
        consider(nearest_labels(points, &settled), &settled);
        let random: Vec<usize> = (0..points.len()).map(|_| rng.gen_range(0..k)).collect();
        consider(random, &settled);
    }
    best
}

fn nearest_labels(points: &[(f64, f64)], centroids: &[(f64, f64)]) -> Vec<usize> {
    points.iter().map(|&p| nearest(p, centroids)).collect()
}

fn mean_of(points: &[(f64, f64)], members: impl Iterator<Item = usize>) -> (f64, f64) {
    let (mut w, mut h, mut n) = (0.0, 0.0, 0usize);
    for i in members {
        w += points[i].0;
        h += points[i].1;
        n += 1;
    }
    (w / n as f64, h / n as f64)
}

fn spread(points: &[(f64, f64)], members: impl Iterator<Item = usize>, centre: (f64, f64)) -> f64 {
    members.map(|i| distance(points[i], centre)).sum()
}

/// Single-point moves between groups while the summed distance of every box
/// to its own group mean drops. Returns the group means and that mean cost.
fn refine(points: &[(f64, f64)], mut labels: Vec<usize>, fallback: &[(f64, f64)]) -> (Vec<(f64, f64)>, f64) {
    let k = fallback.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    if groups.iter().any(Vec::is_empty) {
        return (fallback.to_vec(), mean_distortion(points, fallback));
    }
    let mut costs: Vec<f64> = groups
        .iter()
        .map(|g| spread(points, g.iter().copied(), mean_of(points, g.iter().copied())))
        .collect();
    for _ in 0..MAX_ITERATIONS {
        let mut moved = false;
        for i in 0..points.len() {
            let from = labels[i];
            if groups[from].len() == 1 {
                continue;
            }
            let rest = || groups[from].iter().copied().filter(|&j| j != i);
            let cf = spread(points, rest(), mean_of(points, rest()));
            let mut best: Option<(usize, f64, f64)> = None;
            for to in (0..k).filter(|&g| g != from) {
                let joined = || groups[to].iter().copied().chain(std::iter::once(i));
                let ct = spread(points, joined(), mean_of(points, joined()));
                let gain = costs[from] + costs[to] - cf - ct;
                if gain > 1e-12 && best.is_none_or(|b| gain > b.1) {
                    best = Some((to, gain, ct));
                }
            }
            if let Some((to, _, ct)) = best {
                groups[from].retain(|&j| j != i);
                groups[to].push(i);
                groups[to].sort_unstable();
                labels[i] = to;
                costs[from] = cf;
                costs[to] = ct;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    let means = groups.iter().map(|g| mean_of(points, g.iter().copied())).collect();
    (means, costs.iter().sum::<f64>() / points.len() as f64)
}

/// Extends `centroids` to `k` by repeatedly taking the box farthest from all chosen so far.
fn farthest_from(distinct: &[(f64, f64)], mut centroids: Vec<(f64, f64)>, k: usize) -> Vec<(f64, f64)> {
    while centroids.len() < k {
        let mut far = distinct[0];
        let mut far_d = -1.0;
        for &p in distinct {
            let d = centroids.iter().map(|&c| distance(p, c)).fold(f64::INFINITY, f64::min);
            if d > far_d {
                far_d = d;
                far = p;
            }
        }
        centroids.push(far);
    }
    centroids
}

/// Seeding with probability proportional to squared distance to the chosen set.
fn weighted_start(distinct: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![distinct[rng.gen_range(0..distinct.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = distinct
            .iter()
            .map(|&p| centroids.iter().map(|&c| distance(p, c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return farthest_from(distinct, centroids, k);
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = distinct.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        centroids.push(distinct[chosen]);
    }
    centroids
}

fn lloyd(points: &[(f64, f64)], mut centroids: Vec<(f64, f64)>, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let k = centroids.len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            } else {
                *c = points[rng.gen_range(0..points.len())];
            }
        }
    }
    centroids
}
