//! Pretrained-weight reuse: the weights file format, final-layer surgery
//! and anchor estimation.

mod anchors;
mod surgery;
mod weights;

pub use anchors::{estimate_anchors, mean_distortion};
pub use surgery::{apply_surgery, SurgeryPlan};
pub use weights::{
    load_weights, network_from_weights, save_weights, BatchNormArrays, LayerWeights, WeightsFile,
};
