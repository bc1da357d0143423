use crate::error::{Error, Result};
use crate::eval::nms;
use crate::geometry::Detection;
use crate::tensor::Tensor;

use super::region::{decode_candidates, Candidate, GridShape};
use super::Network;

/// Single forward pass on one `[3, H, W]` image: decode every predictor,
/// keep those with probability strictly above `prob_threshold`, then apply
/// per-class NMS with the head's overlap threshold.
pub fn forward_detect(network: &Network, image: &Tensor, prob_threshold: f32) -> Result<Vec<Detection>> {
    let cfg = network.config();
    if image.shape() != [cfg.channels, cfg.input_height, cfg.input_width] {
        return Err(Error::config(format!(
            "image shape {:?} does not match network input [{}, {}, {}]",
            image.shape(),
            cfg.channels,
            cfg.input_height,
            cfg.input_width
        )));
    }
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let raw = network.forward_infer(&batch)?;
    let [_, _, gh, gw] = raw.shape() else {
        unreachable!("network output is 4-d")
    };
    let grid = GridShape::for_head(network.head(), *gw, *gh);
    let candidates: Vec<Detection> = decode_candidates(raw.data(), &grid, network.head())
        .iter()
        .map(Candidate::detection)
        .filter(|d| d.probability > prob_threshold)
        .collect();
    Ok(nms(&candidates, network.head().nms_overlap_threshold as f64))
}
