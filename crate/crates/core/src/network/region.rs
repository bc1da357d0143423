//! Grid/anchor region head: decoding raw activations into boxes, assigning
//! ground truth to predictors, and the composite squared-error loss.
//!
//! Raw output of one image has shape `[(C+5)·A, Sh, Sw]`; anchor `a` owns
//! channels `a·(C+5) .. (a+1)·(C+5)` holding `tx, ty, tw, th, to` followed
//! by `C` class logits. For cell column `i`, row `j`:
//!
//! ```text
//! bx = (σ(tx) + i) / Sw      bw = pw·exp(tw) / Sw
//! by = (σ(ty) + j) / Sh      bh = ph·exp(th) / Sh
//! P(class c) = σ(to) · softmax(logits)_c
//! ```

use crate::data::BoxAnnotation;
use crate::error::{Error, Result};
use crate::geometry::{Detection, Rect};
use crate::tensor::{Real, Tensor};

use super::config::RegionHeadSpec;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softmax<T: Real>(logits: impl Iterator<Item = T> + Clone) -> Vec<T> {
    let max = logits.clone().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.map(|z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Output grid size and channel bookkeeping for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
    pub anchors: usize,
    pub classes: usize,
}

impl GridShape {
    pub fn for_head(head: &RegionHeadSpec, width: usize, height: usize) -> Self {
        GridShape {
            width,
            height,
            anchors: head.num_anchors(),
            classes: head.num_classes,
        }
    }

    /// Derives the grid from a `[(C+5)·A, Sh, Sw]` raw tensor.
    pub fn from_raw<T: Real>(raw: &Tensor<T>, head: &RegionHeadSpec) -> Result<Self> {
        let [ch, h, w] = raw.shape() else {
            return Err(Error::config(format!(
                "raw grid output must be [channels, S, S], got {:?}",
                raw.shape()
            )));
        };
        if *ch != head.required_filters() {
            return Err(Error::config(format!(
                "raw grid has {ch} channels, head needs {}",
                head.required_filters()
            )));
        }
        Ok(GridShape::for_head(head, *w, *h))
    }

    pub fn entries(&self) -> usize {
        self.classes + 5
    }

    pub fn predictors(&self) -> usize {
        self.anchors * self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.predictors() * self.entries()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of entry `k` of anchor `a` at cell `(i, j)`.
    #[inline]
    pub fn index(&self, a: usize, k: usize, i: usize, j: usize) -> usize {
        ((a * self.entries() + k) * self.height + j) * self.width + i
    }

    /// Predictor number used by [`RegionTargets`].
    #[inline]
    pub fn predictor(&self, a: usize, i: usize, j: usize) -> usize {
        (a * self.height + j) * self.width + i
    }
}

/// Fully decoded predictor: box, objectness and class distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
    pub rect: Rect,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl Candidate {
    pub fn best_class(&self) -> (usize, f64) {
        self.class_probs
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, p)| if p > best.1 { (c, p) } else { best })
    }

    pub fn detection(&self) -> Detection {
        let (class_id, p) = self.best_class();
        Detection {
            class_id,
            rect: self.rect,
            probability: ((self.objectness * p) as f32).clamp(0.0, 1.0),
        }
    }
}

fn decode_rect<T: Real>(raw: &[T], grid: &GridShape, anchor: (f32, f32), a: usize, i: usize, j: usize) -> Rect {
    let v = |k| raw[grid.index(a, k, i, j)].to_f64().unwrap();
    let (sw, sh) = (grid.width as f64, grid.height as f64);
    Rect::new(
        (sigmoid(v(0)) + i as f64) / sw,
        (sigmoid(v(1)) + j as f64) / sh,
        anchor.0 as f64 * v(2).exp() / sw,
        anchor.1 as f64 * v(3).exp() / sh,
    )
}

/// Decodes every `(cell, anchor)` predictor of one image.
pub fn decode_candidates<T: Real>(raw: &[T], grid: &GridShape, head: &RegionHeadSpec) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(grid.predictors());
    for j in 0..grid.height {
        for i in 0..grid.width {
            for (a, &anchor) in head.anchors.iter().enumerate() {
                let rect = decode_rect(raw, grid, anchor, a, i, j);
                let objectness = sigmoid(raw[grid.index(a, 4, i, j)].to_f64().unwrap());
                let class_probs = softmax(
                    (0..grid.classes).map(|c| raw[grid.index(a, 5 + c, i, j)].to_f64().unwrap()),
                );
                out.push(Candidate {
                    cell_x: i,
                    cell_y: j,
                    anchor: a,
                    rect,
                    objectness,
                    class_probs,
                });
            }
        }
    }
    out
}

/// One detection per `(cell, anchor)`, unfiltered.
pub fn decode(raw: &Tensor<f32>, head: &RegionHeadSpec) -> Result<Vec<Detection>> {
    let grid = GridShape::from_raw(raw, head)?;
    Ok(decode_candidates(raw.data(), &grid, head)
        .iter()
        .map(Candidate::detection)
        .collect())
}

/// Inverse of the box decoding: raw `(tx, ty, tw, th)` that decode to
/// `rect` at cell `(i, j)` with the given anchor.
pub fn encode_offsets(rect: &Rect, cell_x: usize, cell_y: usize, anchor: (f32, f32), grid: &GridShape) -> [f64; 4] {
    let (sw, sh) = (grid.width as f64, grid.height as f64);
    [
        logit(rect.cx * sw - cell_x as f64),
        logit(rect.cy * sh - cell_y as f64),
        (rect.w * sw / anchor.0 as f64).ln(),
        (rect.h * sh / anchor.1 as f64).ln(),
    ]
}

/// Which predictor is responsible for a ground-truth box, and its targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub truth_index: usize,
    pub class_id: usize,
    pub rect: Rect,
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
    /// Position inside the owning cell, the target for `σ(tx)` / `σ(ty)`.
    pub target_x: f64,
    pub target_y: f64,
    /// Log-space size targets for `tw` / `th`.
    pub target_w: f64,
    pub target_h: f64,
}

/// Assigns each truth to the cell containing its center and the anchor whose
/// shape (co-centered) has the highest IoU with it; ties go to the lowest
/// anchor index.
pub fn assign_truths(truths: &[BoxAnnotation], head: &RegionHeadSpec, grid: &GridShape) -> Result<Vec<Assignment>> {
    let (sw, sh) = (grid.width as f64, grid.height as f64);
    truths
        .iter()
        .enumerate()
        .map(|(t, truth)| {
            if !(truth.w > 0.0 && truth.h > 0.0) {
                return Err(Error::data(format!(
                    "truth {t} has zero width or height"
                )));
            }
            if truth.class_id >= head.num_classes {
                return Err(Error::data(format!(
                    "truth {t} has class {} but the head has {} classes",
                    truth.class_id, head.num_classes
                )));
            }
            let rect = truth.rect();
            let cell_x = ((rect.cx * sw).floor() as usize).min(grid.width - 1);
            let cell_y = ((rect.cy * sh).floor() as usize).min(grid.height - 1);
            let (gw, gh) = (rect.w * sw, rect.h * sh);
            let mut best = (0usize, f64::NEG_INFINITY);
            for (a, &(pw, ph)) in head.anchors.iter().enumerate() {
                let iou = Rect::shape_iou(gw, gh, pw as f64, ph as f64);
                if iou > best.1 {
                    best = (a, iou);
                }
            }
            let (pw, ph) = head.anchors[best.0];
            Ok(Assignment {
                truth_index: t,
                class_id: truth.class_id,
                rect,
                cell_x,
                cell_y,
                anchor: best.0,
                target_x: rect.cx * sw - cell_x as f64,
                target_y: rect.cy * sh - cell_y as f64,
                target_w: (gw / pw as f64).ln(),
                target_h: (gh / ph as f64).ln(),
            })
        })
        .collect()
}

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub object: f64,
    pub noobject: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coord: 1.0,
            object: 5.0,
            noobject: 1.0,
            class: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Role {
    /// Penalized towards `σ(to) = 0`.
    Background,
    /// Overlaps a truth closely enough that it is neither rewarded nor penalized.
    Ignored,
    /// Responsible for `assignment`; objectness regresses to `objectness_target`.
    Owner {
        assignment: usize,
        objectness_target: f64,
    },
}

/// Per-predictor roles. Objectness targets and the ignore mask depend on the
/// current predictions but are treated as constants when differentiating.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTargets {
    pub grid: GridShape,
    pub roles: Vec<Role>,
    pub assignments: Vec<Assignment>,
}

pub fn build_targets<T: Real>(
    raw: &[T],
    grid: &GridShape,
    head: &RegionHeadSpec,
    assignments: &[Assignment],
) -> RegionTargets {
    let mut roles = vec![Role::Background; grid.predictors()];
    let ignore = head.objectness_ignore_iou as f64;
    if !assignments.is_empty() {
        for j in 0..grid.height {
            for i in 0..grid.width {
                for (a, &anchor) in head.anchors.iter().enumerate() {
                    let rect = decode_rect(raw, grid, anchor, a, i, j);
                    let best = assignments
                        .iter()
                        .map(|t| rect.iou(&t.rect))
                        .fold(0.0, f64::max);
                    if best > ignore {
                        roles[grid.predictor(a, i, j)] = Role::Ignored;
                    }
                }
            }
        }
    }
    // later truths overwrite earlier ones on a shared predictor
    for (n, t) in assignments.iter().enumerate() {
        let rect = decode_rect(raw, grid, head.anchors[t.anchor], t.anchor, t.cell_x, t.cell_y);
        roles[grid.predictor(t.anchor, t.cell_x, t.cell_y)] = Role::Owner {
            assignment: n,
            objectness_target: rect.iou(&t.rect),
        };
    }
    RegionTargets {
        grid: *grid,
        roles,
        assignments: assignments.to_vec(),
    }
}

/// Loss with frozen targets; writes `∂loss/∂raw` into `grad` (overwritten).
pub fn loss_with_targets<T: Real>(
    raw: &[T],
    targets: &RegionTargets,
    weights: &LossWeights,
    grad: &mut [T],
) -> T {
    let grid = &targets.grid;
    grad.iter_mut().for_each(|g| *g = T::zero());
    let two = T::lit(2.0);
    let (wc, wo, wn, wk) = (
        T::lit(weights.coord),
        T::lit(weights.object),
        T::lit(weights.noobject),
        T::lit(weights.class),
    );
    let mut loss = T::zero();
    for a in 0..grid.anchors {
        for j in 0..grid.height {
            for i in 0..grid.width {
                let role = targets.roles[grid.predictor(a, i, j)];
                let io = grid.index(a, 4, i, j);
                let so = sigmoid(raw[io]);
                match role {
                    Role::Ignored => {}
                    Role::Background => {
                        loss = loss + wn * so * so;
                        grad[io] = two * wn * so * so * (T::one() - so);
                    }
                    Role::Owner {
                        assignment,
                        objectness_target,
                    } => {
                        let t = &targets.assignments[assignment];
                        let to = T::lit(objectness_target);
                        loss = loss + wo * (so - to) * (so - to);
                        grad[io] = two * wo * (so - to) * so * (T::one() - so);

                        for (k, target) in [(0, t.target_x), (1, t.target_y)] {
                            let idx = grid.index(a, k, i, j);
                            let s = sigmoid(raw[idx]);
                            let r = s - T::lit(target);
                            loss = loss + wc * r * r;
                            grad[idx] = two * wc * r * s * (T::one() - s);
                        }
                        for (k, target) in [(2, t.target_w), (3, t.target_h)] {
                            let idx = grid.index(a, k, i, j);
                            let r = raw[idx] - T::lit(target);
                            loss = loss + wc * r * r;
                            grad[idx] = two * wc * r;
                        }

                        let logits = (0..grid.classes).map(|c| raw[grid.index(a, 5 + c, i, j)]);
                        let p = softmax(logits);
                        let resid: Vec<T> = p
                            .iter()
                            .enumerate()
                            .map(|(c, &pc)| pc - if c == t.class_id { T::one() } else { T::zero() })
                            .collect();
                        let dot: T = resid.iter().zip(&p).map(|(&r, &pc)| r * pc).sum();
                        for c in 0..grid.classes {
                            loss = loss + wk * resid[c] * resid[c];
                            grad[grid.index(a, 5 + c, i, j)] = two * wk * p[c] * (resid[c] - dot);
                        }
                    }
                }
            }
        }
    }
    loss
}

/// Loss and gradient for one image's raw output `[(C+5)·A, Sh, Sw]`.
pub fn region_loss<T: Real>(
    raw: &Tensor<T>,
    assignments: &[Assignment],
    head: &RegionHeadSpec,
) -> Result<(T, Tensor<T>)> {
    region_loss_weighted(raw, assignments, head, &LossWeights::default())
}

pub fn region_loss_weighted<T: Real>(
    raw: &Tensor<T>,
    assignments: &[Assignment],
    head: &RegionHeadSpec,
    weights: &LossWeights,
) -> Result<(T, Tensor<T>)> {
    let grid = GridShape::from_raw(raw, head)?;
    let targets = build_targets(raw.data(), &grid, head, assignments);
    let mut grad = Tensor::zeros(raw.shape());
    let loss = loss_with_targets(raw.data(), &targets, weights, grad.data_mut());
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, Differentiable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(classes: usize, anchors: Vec<(f32, f32)>) -> RegionHeadSpec {
        RegionHeadSpec::new(classes, anchors)
    }

    fn random_raw(h: &RegionHeadSpec, s: usize, seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h.required_filters() * s * s;
        Tensor::from_vec(
            &[h.required_filters(), s, s],
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn decode_cell_origin() {
        let h = head(1, vec![(1.0, 1.0)]);
        let raw = Tensor::<f32>::zeros(&[6, 13, 13]);
        let dets = decode(&raw, &h).unwrap();
        assert_eq!(dets.len(), 169);
        let d0 = dets[0].rect;
        assert!((d0.cx - 0.5 / 13.0).abs() < 1e-12);
        assert!((d0.cy - 0.038_461_5).abs() < 1e-6);
        assert!((d0.w - 1.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn decode_encode_round_trip() {
        let h = head(2, vec![(0.7, 1.3), (2.0, 1.1)]);
        let raw = random_raw(&h, 5, 3, 3.0).cast::<f32>();
        let grid = GridShape::from_raw(&raw, &h).unwrap();
        for c in decode_candidates(raw.data(), &grid, &h) {
            let enc = encode_offsets(&c.rect, c.cell_x, c.cell_y, h.anchors[c.anchor], &grid);
            for (k, e) in enc.iter().enumerate() {
                let orig = raw.data()[grid.index(c.anchor, k, c.cell_x, c.cell_y)] as f64;
                assert!((e - orig).abs() < 1e-5, "{e} vs {orig}");
            }
        }
    }

    #[test]
    fn probabilities_are_bounded_and_normalized() {
        let h = head(4, vec![(1.0, 1.0), (2.0, 2.0)]);
        let raw = random_raw(&h, 4, 8, 6.0);
        let grid = GridShape::from_raw(&raw, &h).unwrap();
        for c in decode_candidates(raw.data(), &grid, &h) {
            let sum: f64 = c.class_probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let d = c.detection();
            assert!((0.0..=1.0).contains(&d.probability));
            assert!(d.rect.cx >= 0.0 && d.rect.cx <= 1.0 && d.rect.w > 0.0);
        }
    }

    #[test]
    fn assignment_rules() {
        let h = head(1, vec![(1.0, 1.0), (2.0, 2.0), (1.3, 3.9)]);
        let grid = GridShape::for_head(&h, 13, 13);
        // exactly anchor 2's shape, centered in cell (6,6)
        let t = BoxAnnotation::new(0, 6.5 / 13.0, 6.5 / 13.0, 1.3 / 13.0, 3.9 / 13.0);
        let a = assign_truths(&[t], &h, &grid).unwrap();
        assert_eq!((a[0].anchor, a[0].cell_x, a[0].cell_y), (2, 6, 6));

        let two = [
            BoxAnnotation::new(0, 0.1, 0.1, 0.1, 0.1),
            BoxAnnotation::new(0, 0.9, 0.9, 0.1, 0.1),
        ];
        let a = assign_truths(&two, &h, &grid).unwrap();
        assert_ne!((a[0].cell_x, a[0].cell_y), (a[1].cell_x, a[1].cell_y));

        // a square between (1,2) and (2,1) has equal IoU with both
        let tie = head(1, vec![(1.0, 2.0), (2.0, 1.0)]);
        let g = GridShape::for_head(&tie, 4, 4);
        let a = assign_truths(&[BoxAnnotation::new(0, 0.5, 0.5, 0.25, 0.25)], &tie, &g).unwrap();
        assert_eq!(a[0].anchor, 0);

        let bad = BoxAnnotation::new(0, 0.5, 0.5, 0.0, 0.2);
        assert!(matches!(assign_truths(&[bad], &h, &grid), Err(Error::Data(_))));
    }

    #[test]
    fn no_truth_closed_form() {
        let h = head(1, vec![(1.0, 1.0)]);
        let raw = Tensor::<f64>::zeros(&[6, 2, 2]);
        let (loss, _) = region_loss(&raw, &[], &h).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_offsets_give_zero_coordinate_term() {
        let h = head(2, vec![(1.0, 1.0), (2.0, 3.0)]);
        let grid = GridShape::for_head(&h, 4, 4);
        let t = BoxAnnotation::new(1, 0.4, 0.6, 0.3, 0.5);
        let a = assign_truths(&[t], &h, &grid).unwrap();
        let mut raw = Tensor::<f64>::zeros(&[14, 4, 4]);
        let enc = encode_offsets(&a[0].rect, a[0].cell_x, a[0].cell_y, h.anchors[a[0].anchor], &grid);
        for (k, v) in enc.iter().enumerate() {
            raw.data_mut()[grid.index(a[0].anchor, k, a[0].cell_x, a[0].cell_y)] = *v;
        }
        let only_coord = LossWeights {
            coord: 1.0,
            object: 0.0,
            noobject: 0.0,
            class: 0.0,
        };
        let (loss, _) = region_loss_weighted(&raw, &a, &h, &only_coord).unwrap();
        assert!(loss.abs() < 1e-20);
    }

    struct LossProbe {
        raw: Tensor<f64>,
        targets: RegionTargets,
    }

    impl Differentiable for LossProbe {
        fn num_params(&self) -> usize {
            self.raw.len()
        }
        fn param(&self, i: usize) -> f64 {
            self.raw.data()[i]
        }
        fn set_param(&mut self, i: usize, v: f64) {
            self.raw.data_mut()[i] = v;
        }
        fn evaluate(&mut self) -> (f64, u64) {
            let mut g = vec![0.0; self.raw.len()];
            (loss_with_targets(self.raw.data(), &self.targets, &LossWeights::default(), &mut g), 0)
        }
        fn gradient(&mut self) -> Vec<f64> {
            let mut g = vec![0.0; self.raw.len()];
            loss_with_targets(self.raw.data(), &self.targets, &LossWeights::default(), &mut g);
            g
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for (seed, classes, anchors, s) in [(1u64, 1usize, 1usize, 2usize), (2, 3, 2, 3), (3, 2, 5, 4)] {
            let h = head(classes, (0..anchors).map(|a| (1.0 + a as f32 * 0.5, 1.5)).collect());
            let raw = random_raw(&h, s, seed, 2.0);
            let grid = GridShape::from_raw(&raw, &h).unwrap();
            let truths = [
                BoxAnnotation::new(0, 0.3, 0.3, 0.4, 0.3),
                BoxAnnotation::new(classes - 1, 0.8, 0.7, 0.2, 0.35),
            ];
            let a = assign_truths(&truths, &h, &grid).unwrap();
            let targets = build_targets(raw.data(), &grid, &h, &a);
            let r = finite_difference_check(&mut LossProbe { raw, targets }, 1e-3);
            assert!(r.max_relative_error < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn moving_any_penalized_component_increases_loss() {
        let h = head(2, vec![(1.0, 1.0), (2.0, 2.0)]);
        let raw = random_raw(&h, 3, 4, 1.0);
        let grid = GridShape::from_raw(&raw, &h).unwrap();
        let a = assign_truths(&[BoxAnnotation::new(1, 0.5, 0.5, 0.3, 0.3)], &h, &grid).unwrap();
        let targets = build_targets(raw.data(), &grid, &h, &a);
        let mut g = vec![0.0; raw.len()];
        let base = loss_with_targets(raw.data(), &targets, &LossWeights::default(), &mut g);
        for i in 0..raw.len() {
            if g[i] == 0.0 {
                continue;
            }
            // step along the gradient sign, i.e. away from the target
            let mut moved = raw.clone();
            moved.data_mut()[i] += 1e-3 * g[i].signum();
            let mut g2 = vec![0.0; raw.len()];
            let l = loss_with_targets(moved.data(), &targets, &LossWeights::default(), &mut g2);
            assert!(l > base, "index {i}");
        }
    }
}
