//! Datasets, augmentation, batch composition and synthetic scenes.

mod annotation;
mod augment;
mod batch;
pub mod color;
pub mod image;
mod manifest;
mod synth;

use crate::tensor::Tensor;

pub use annotation::{parse_annotation_line, parse_label_text, BoxAnnotation};
pub use augment::{
    augment, augment_to, choose_input_dim, input_dim_candidates, retained_fraction, AugmentRecord,
    AugmentationConfig,
};
pub use batch::{compose_batch, sample_indices, Batch, BatchOptions, Dataset};
pub use color::hue_shift;
pub use manifest::{
    generate_synthetic_dataset, label_path, label_text, load_sample, names_path, synthetic_scene_spec,
    ClassCount, DatasetManifest, SyntheticDataset, SyntheticDatasetSpec,
};
pub use synth::{class_signature, generate_synthetic_scene, ClassSignature, Palette, Pattern, SyntheticSceneSpec};

/// An image with its ground truth. Hard negatives carry no boxes on purpose.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// `[3, H, W]`, RGB in `[0, 1]`.
    pub pixels: Tensor,
    pub boxes: Vec<BoxAnnotation>,
    pub is_hard_negative: bool,
}
