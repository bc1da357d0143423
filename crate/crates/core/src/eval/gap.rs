use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Detection;

use super::stats::{summarize, Summary};

/// Separation between probabilities on trained classes and on look-alike
/// unknown objects.
#[derive(Clone, Debug, PartialEq)]
pub struct GapAnalysis {
    /// Known true-positive probabilities per class.
    pub per_class: BTreeMap<usize, Summary>,
    pub unknown: Option<Summary>,
    pub known_min: f64,
    /// 0 when there were no unknown detections at all.
    pub unknown_max: f64,
    /// `known_min − unknown_max`.
    pub gap: f64,
    /// Midpoint between the two populations, present iff they separate.
    pub threshold: Option<f64>,
    pub overlap: bool,
}

/// `known`: true-positive detections on trained classes (class = true
/// class); `unknown`: every detection on unknown or distractor content.
/// The recommended threshold is the midpoint of `max(unknown)` and
/// `min(known)`; populations that touch or cross are flagged as overlap
/// and get no threshold.
pub fn probability_gap_analysis(known: &[Detection], unknown: &[Detection]) -> Result<GapAnalysis> {
    if known.is_empty() {
        return Err(Error::data("gap analysis needs at least one known true positive"));
    }
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for d in known {
        by_class.entry(d.class_id).or_default().push(d.probability as f64);
    }
    let per_class = by_class
        .into_iter()
        .map(|(c, v)| (c, summarize(&v).expect("non-empty by construction")))
        .collect();
    let known_min = known.iter().map(|d| d.probability as f64).fold(f64::INFINITY, f64::min);
    let unknown_probs: Vec<f64> = unknown.iter().map(|d| d.probability as f64).collect();
    let unknown_max = unknown_probs.iter().copied().fold(0.0, f64::max);
    let gap = known_min - unknown_max;
    let overlap = gap <= 0.0;
    Ok(GapAnalysis {
        per_class,
        unknown: summarize(&unknown_probs),
        known_min,
        unknown_max,
        gap,
        threshold: (!overlap).then_some(0.5 * (known_min + unknown_max)),
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    fn det(p: f32) -> Detection {
        Detection {
            class_id: 0,
            rect: Rect::new(0.5, 0.5, 0.2, 0.2),
            probability: p,
        }
    }

    #[test]
    fn midpoint_rule() {
        let g = probability_gap_analysis(&[det(0.9), det(0.92)], &[det(0.4), det(0.5)]).unwrap();
        assert!((g.threshold.unwrap() - 0.7).abs() < 1e-6);
        assert!(g.gap > 0.0 && !g.overlap);
    }

    #[test]
    fn overlap_has_no_threshold() {
        let g = probability_gap_analysis(&[det(0.9)], &[det(0.95)]).unwrap();
        assert!(g.overlap && g.threshold.is_none());
    }

    #[test]
    fn empty_sets() {
        assert!(probability_gap_analysis(&[], &[det(0.1)]).is_err());
        let g = probability_gap_analysis(&[det(0.8)], &[]).unwrap();
        assert_eq!(g.unknown_max, 0.0);
        assert!((g.threshold.unwrap() - 0.4).abs() < 1e-6);
    }
}
