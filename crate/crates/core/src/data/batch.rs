use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{mix_seed, Exec};
use crate::tensor::Tensor;

use super::augment::{augment_to, AugmentationConfig};
use super::{AnnotatedImage, BoxAnnotation};

/// In-memory training set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn new(samples: Vec<AnnotatedImage>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn hard_negative_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_hard_negative).count()
    }

    /// Every annotation's `(w, h)`, e.g. for anchor estimation.
    pub fn box_shapes(&self) -> Vec<(f32, f32)> {
        self.samples
            .iter()
            .flat_map(|s| s.boxes.iter().map(|b| (b.w, b.h)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// At most `⌊cap · batch_size⌋` hard negatives per batch.
    pub hard_negative_cap: f64,
    /// Square network input side for this batch.
    pub input_dim: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            batch_size: 64,
            hard_negative_cap: 0.25,
            input_dim: 416,
        }
    }
}

/// Augmented images stacked as `[N, 3, D, D]` with their annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub truths: Vec<Vec<BoxAnnotation>>,
    /// Dataset index of each sample.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn hard_negatives(&self, dataset: &Dataset) -> usize {
        self.indices.iter().filter(|&&i| dataset.samples[i].is_hard_negative).count()
    }
}

/// Picks `batch_size` dataset indices uniformly with replacement; once the
/// hard-negative quota is used up, further draws come from positives only.
pub fn sample_indices(dataset: &Dataset, batch_size: usize, cap: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let positives: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset.samples[i].is_hard_negative).collect();
    if positives.is_empty() {
        return Err(Error::config(
            "dataset holds only hard negatives; the model would learn to detect nothing",
        ));
    }
    let quota = (cap.max(0.0) * batch_size as f64).floor() as usize;
    let mut negatives = 0;
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.gen_range(0..dataset.len());
        if dataset.samples[i].is_hard_negative {
            if negatives < quota {
                negatives += 1;
                out.push(i);
            } else {
                out.push(positives[rng.gen_range(0..positives.len())]);
            }
        } else {
            out.push(i);
        }
    }
    Ok(out)
}

/// Draws a batch and augments every sample. Sample `k` uses its own random
/// stream seeded from `(batch seed, k)`, so the result does not depend on
/// how `exec` schedules the work.
pub fn compose_batch(
    dataset: &Dataset,
    options: &BatchOptions,
    augmentation: &AugmentationConfig,
    rng: &mut impl Rng,
    exec: Exec,
) -> Result<Batch> {
    let indices = sample_indices(dataset, options.batch_size, options.hard_negative_cap, rng)?;
    let batch_seed: u64 = rng.gen();
    let d = options.input_dim;
    let parts = exec.map(indices.len(), |k| {
        let mut r = ChaCha8Rng::seed_from_u64(mix_seed(batch_seed, k as u64));
        augment_to(&dataset.samples[indices[k]], augmentation, &mut r, d, d).0
    });
    let mut data = Vec::with_capacity(indices.len() * 3 * d * d);
    let mut truths = Vec::with_capacity(indices.len());
    for p in parts {
        data.extend_from_slice(p.pixels.data());
        truths.push(p.boxes);
    }
    Ok(Batch {
        images: Tensor::from_vec(&[indices.len(), 3, d, d], data)?,
        truths,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(negative: bool) -> AnnotatedImage {
        AnnotatedImage {
            pixels: Tensor::full(&[3, 8, 8], 0.5),
            boxes: if negative { vec![] } else { vec![BoxAnnotation::new(0, 0.5, 0.5, 0.5, 0.5)] },
            is_hard_negative: negative,
        }
    }

    #[test]
    fn cap_respected() {
        let ds = Dataset::new((0..10).map(|i| sample(i % 2 == 0)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let idx = sample_indices(&ds, 64, 0.25, &mut rng).unwrap();
            assert!(idx.iter().filter(|&&i| ds.samples[i].is_hard_negative).count() <= 16);
        }
    }

    #[test]
    fn only_negatives_is_config_error() {
        let ds = Dataset::new(vec![sample(true)]);
        let err = sample_indices(&ds, 4, 0.25, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn batch_shape_and_exec_independence() {
        let ds = Dataset::new((0..5).map(|i| sample(i == 0)).collect());
        let opts = BatchOptions {
            batch_size: 6,
            hard_negative_cap: 0.25,
            input_dim: 16,
        };
        let aug = AugmentationConfig::default();
        let a = compose_batch(&ds, &opts, &aug, &mut ChaCha8Rng::seed_from_u64(1), Exec::Sequential).unwrap();
        let b = compose_batch(&ds, &opts, &aug, &mut ChaCha8Rng::seed_from_u64(1), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[6, 3, 16, 16]);
    }
}
