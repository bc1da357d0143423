//! Detection evaluation: NMS, matching, PR curves and AP, probability
//! statistics and the known/unknown probability gap.

mod ap;
mod gap;
mod matching;
mod nms;
mod report;
mod stats;
pub mod svg;

pub use crate::geometry::{iou, Detection};
pub use ap::{compute_pr_and_ap, compute_pr_and_ap_at, Labeled, PrCurve, PrPoint};
pub use gap::{probability_gap_analysis, GapAnalysis};
pub use matching::{match_detections, MatchResult};
pub use nms::nms;
pub use report::{
    detect_all, evaluate, evaluate_detections, true_positives, ClassResult, EvalOptions, EvalReport,
    EVAL_FLOOR,
};
pub use stats::{summarize, Summary};
pub use svg::{box_plot, pr_curve};
