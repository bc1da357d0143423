use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::image::resize_bilinear;
use crate::data::{AnnotatedImage, BoxAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::network::{forward_detect, Network};

use super::ap::{compute_pr_and_ap_at, Labeled, PrCurve};
use super::matching::match_detections;
use super::stats::{summarize, Summary};
use super::svg;

/// Probability floor used for evaluation so the PR sweep reaches low
/// confidences.
pub const EVAL_FLOOR: f32 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub floor: f32,
    pub iou_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            floor: EVAL_FLOOR,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    pub num_truths: usize,
    /// `None` when the class has no ground truth in the evaluated set.
    pub curve: Option<PrCurve>,
}

impl ClassResult {
    pub fn ap(&self) -> Option<f64> {
        self.curve.as_ref().map(|c| c.ap)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassResult>,
    /// All classes pooled; present iff at least one class was evaluated.
    pub combined: Option<PrCurve>,
    /// True-positive probabilities grouped by the true class.
    pub probability_stats: BTreeMap<usize, Summary>,
    pub true_positives: Vec<Detection>,
    pub recommended_threshold: Option<f64>,
}

/// Runs the detector on every sample (resized to the network input when
/// needed). Output order follows the input order whatever the executor.
pub fn detect_all(network: &Network, samples: &[AnnotatedImage], threshold: f32) -> Result<Vec<Vec<Detection>>> {
    let cfg = network.config();
    let (w, h) = (cfg.input_width, cfg.input_height);
    network
        .exec()
        .map(samples.len(), |i| {
            let px = &samples[i].pixels;
            if px.shape()[1..] == [h, w] {
                forward_detect(network, px, threshold)
            } else {
                forward_detect(network, &resize_bilinear(px, w, h), threshold)
            }
        })
        .into_iter()
        .collect()
}

/// Detections that matched a same-class truth, in image order.
pub fn true_positives(detections: &[Vec<Detection>], truths: &[&[BoxAnnotation]], iou_threshold: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for (dets, gt) in detections.iter().zip(truths) {
        let m = match_detections(dets, gt, iou_threshold);
        out.extend(dets.iter().enumerate().filter(|(i, _)| m.is_true_positive(*i)).map(|(_, d)| *d));
    }
    out
}

/// Aggregates per-image detections into per-class and pooled PR curves.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    truths: &[&[BoxAnnotation]],
    class_names: &[String],
    iou_threshold: f64,
) -> Result<EvalReport> {
    let num_classes = class_names.len();
    let mut labeled: Vec<Vec<Labeled>> = vec![Vec::new(); num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut tp_probs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut tps = Vec::new();
    for (dets, gt) in detections.iter().zip(truths) {
        for t in gt.iter() {
            if t.class_id >= num_classes {
                return Err(Error::data(format!(
                    "ground-truth class {} but the model has {num_classes} classes",
                    t.class_id
                )));
            }
            counts[t.class_id] += 1;
        }
        let m = match_detections(dets, gt, iou_threshold);
        for (i, d) in dets.iter().enumerate() {
            let tp = m.is_true_positive(i);
            if d.class_id < num_classes {
                labeled[d.class_id].push(Labeled {
                    confidence: d.probability as f64,
                    true_positive: tp,
                });
            }
            if tp {
                tp_probs.entry(d.class_id).or_default().push(d.probability as f64);
                tps.push(*d);
            }
        }
    }
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let curve = if counts[c] > 0 {
            Some(compute_pr_and_ap_at(&labeled[c], counts[c], iou_threshold)?)
        } else {
            None
        };
        classes.push(ClassResult {
            class_id: c,
            name: class_names[c].clone(),
            num_truths: counts[c],
            curve,
        });
    }
    let total: usize = counts.iter().sum();
    let combined = if total > 0 {
        let pooled: Vec<Labeled> = labeled.iter().flatten().copied().collect();
        Some(compute_pr_and_ap_at(&pooled, total, iou_threshold)?)
    } else {
        None
    };
    Ok(EvalReport {
        classes,
        combined,
        probability_stats: tp_probs
            .into_iter()
            .map(|(c, v)| (c, summarize(&v).expect("non-empty")))
            .collect(),
        true_positives: tps,
        recommended_threshold: None,
    })
}

/// Detects at the evaluation floor on every sample and builds the report.
/// Class names default to `class<i>` for classes without a name.
pub fn evaluate(network: &Network, samples: &[AnnotatedImage], class_names: &[String], options: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let num_classes = network.head().num_classes;
    let names: Vec<String> = (0..num_classes)
        .map(|c| class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
        .collect();
    for s in samples {
        if let Some(b) = s.boxes.iter().find(|b| b.class_id >= num_classes) {
            return Err(Error::data(format!(
                "ground-truth class {} but the model has {num_classes} classes",
                b.class_id
            )));
        }
    }
    let detections = detect_all(network, samples, options.floor)?;
    let truths: Vec<&[BoxAnnotation]> = samples.iter().map(|s| s.boxes.as_slice()).collect();
    evaluate_detections(&detections, &truths, &names, options.iou_threshold)
}

fn class_label(report: &EvalReport, class_id: usize) -> &str {
    report.classes.get(class_id).map_or("?", |c| c.name.as_str())
}

impl EvalReport {
    pub fn combined_ap(&self) -> Option<f64> {
        self.combined.as_ref().map(|c| c.ap)
    }

    /// `class,recall,precision` for every class curve and the pooled one.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("class,recall,precision\n");
        let named = self.classes.iter().filter_map(|c| c.curve.as_ref().map(|k| (c.name.as_str(), k)));
        for (name, curve) in named.chain(self.combined.as_ref().map(|k| ("combined", k))) {
            for p in &curve.points {
                let _ = writeln!(s, "{name},{},{}", p.recall, p.precision);
            }
        }
        s
    }

    /// `class,ap`.
    pub fn ap_csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for c in &self.classes {
            if let Some(ap) = c.ap() {
                let _ = writeln!(s, "{},{ap}", c.name);
            }
        }
        if let Some(ap) = self.combined_ap() {
            let _ = writeln!(s, "combined,{ap}");
        }
        s
    }

    /// `class,min,q1,median,q3,max`.
    pub fn probabilities_csv(&self) -> String {
        let mut s = String::from("class,min,q1,median,q3,max\n");
        for (&c, q) in &self.probability_stats {
            let _ = writeln!(s, "{},{},{},{},{},{}", class_label(self, c), q.min, q.q1, q.median, q.q3, q.max);
        }
        s
    }

    /// Writes the three CSV files, one PR-curve SVG per class plus the pooled
    /// curve, and a box-plot SVG of true-positive probabilities.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("curves.csv", self.curves_csv())?;
        put("ap.csv", self.ap_csv())?;
        put("probabilities.csv", self.probabilities_csv())?;
        for c in &self.classes {
            if let Some(curve) = &c.curve {
                put(&format!("pr_{}.svg", c.name), svg::pr_curve(&c.name, curve))?;
            }
        }
        if let Some(curve) = &self.combined {
            put("pr_combined.svg", svg::pr_curve("combined", curve))?;
        }
        let boxes: Vec<(String, Summary)> = self
            .probability_stats
            .iter()
            .map(|(&c, s)| (class_label(self, c).to_string(), *s))
            .collect();
        put("probabilities.svg", svg::box_plot(&boxes, self.recommended_threshold))
    }
}
