use rand::Rng;

use crate::geometry::Rect;

use super::color::adjust_hsv;
use super::image::{flip_horizontal, image_dims, resample_region};
use super::{AnnotatedImage, BoxAnnotation};

const CROP_ATTEMPTS: usize = 20;

/// Randomized, label-preserving transformations applied to every training
/// sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationConfig {
    /// Input size varies by up to this fraction of the base size.
    pub scale_jitter: f64,
    pub hflip_prob: f64,
    /// Hue offset drawn from `±hue_delta` (fraction of the hue circle).
    pub hue_delta: f64,
    /// Saturation and exposure are each scaled by `s` or `1/s`,
    /// `s ∈ [1, sat_exposure_factor]`.
    pub sat_exposure_factor: f64,
    /// Each crop edge moves by up to this fraction of the image size.
    pub annotation_jitter: f64,
    /// Minimum fraction of every box's area that must stay inside the crop.
    pub annotation_retention: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale_jitter: 0.30,
            hflip_prob: 0.5,
            hue_delta: 0.10,
            sat_exposure_factor: 1.5,
            annotation_jitter: 0.20,
            annotation_retention: 0.80,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Everything off: `augment` returns its input unchanged.
    pub fn identity() -> Self {
        AugmentationConfig {
            scale_jitter: 0.0,
            hflip_prob: 0.0,
            hue_delta: 0.0,
            sat_exposure_factor: 1.0,
            annotation_jitter: 0.0,
            annotation_retention: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.annotation_retention > 0.0
            && self.annotation_retention <= 1.0
            && self.annotation_jitter >= 0.0
            && self.scale_jitter >= 0.0
            && self.hue_delta >= 0.0
            && self.sat_exposure_factor >= 1.0
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(crate::Error::config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// What one call to [`augment`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRecord {
    /// Crop `(x0, y0, x1, y1)` as fractions of the source image.
    pub crop: (f64, f64, f64, f64),
    pub flipped: bool,
    pub hue_delta: f32,
    pub saturation: f32,
    pub exposure: f32,
}

/// Fraction of `b`'s area inside `crop`.
pub fn retained_fraction(b: &BoxAnnotation, crop: (f64, f64, f64, f64)) -> f64 {
    let r = b.rect();
    let c = Rect::from_corners(crop.0, crop.1, crop.2, crop.3);
    r.intersection(&c) / r.area()
}

fn choose_crop(boxes: &[BoxAnnotation], cfg: &AugmentationConfig, rng: &mut impl Rng) -> (f64, f64, f64, f64) {
    let j = cfg.annotation_jitter;
    if j <= 0.0 {
        return (0.0, 0.0, 1.0, 1.0);
    }
    for _ in 0..CROP_ATTEMPTS {
        let crop = (
            rng.gen_range(-j..=j),
            rng.gen_range(-j..=j),
            1.0 + rng.gen_range(-j..=j),
            1.0 + rng.gen_range(-j..=j),
        );
        if crop.2 - crop.0 <= 0.0 || crop.3 - crop.1 <= 0.0 {
            continue;
        }
        if boxes
            .iter()
            .all(|b| retained_fraction(b, crop) >= cfg.annotation_retention)
        {
            return crop;
        }
    }
    (0.0, 0.0, 1.0, 1.0)
}

/// Clips `b` to `crop` and expresses it in crop-relative coordinates.
fn recrop(b: &BoxAnnotation, crop: (f64, f64, f64, f64)) -> Option<BoxAnnotation> {
    let (x0, y0, x1, y1) = b.rect().corners();
    let (cw, ch) = (crop.2 - crop.0, crop.3 - crop.1);
    let nx0 = ((x0.max(crop.0) - crop.0) / cw).clamp(0.0, 1.0);
    let ny0 = ((y0.max(crop.1) - crop.1) / ch).clamp(0.0, 1.0);
    let nx1 = ((x1.min(crop.2) - crop.0) / cw).clamp(0.0, 1.0);
    let ny1 = ((y1.min(crop.3) - crop.1) / ch).clamp(0.0, 1.0);
    let r = Rect::from_corners(nx0, ny0, nx1, ny1);
    let out = BoxAnnotation::new(b.class_id, r.cx as f32, r.cy as f32, r.w as f32, r.h as f32);
    out.validate().ok().map(|_| out)
}

/// [`augment_to`] at the sample's own resolution.
pub fn augment(sample: &AnnotatedImage, cfg: &AugmentationConfig, rng: &mut impl Rng) -> (AnnotatedImage, AugmentRecord) {
    let (w, h) = image_dims(&sample.pixels);
    augment_to(sample, cfg, rng, w, h)
}

/// Crop/translate (annotation jitter with rejection resampling), horizontal
/// flip, hue shift, saturation and exposure scaling, clamping; the result is
/// resampled to `out_w × out_h`.
pub fn augment_to(
    sample: &AnnotatedImage,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
    out_w: usize,
    out_h: usize,
) -> (AnnotatedImage, AugmentRecord) {
    let crop = choose_crop(&sample.boxes, cfg, rng);
    let flipped = rng.gen_bool(cfg.hflip_prob.clamp(0.0, 1.0));
    let hue_delta = if cfg.hue_delta > 0.0 {
        rng.gen_range(-cfg.hue_delta..=cfg.hue_delta) as f32
    } else {
        0.0
    };
    let mut scale = || {
        if cfg.sat_exposure_factor > 1.0 {
            let s = rng.gen_range(1.0..=cfg.sat_exposure_factor) as f32;
            if rng.gen_bool(0.5) {
                s
            } else {
                1.0 / s
            }
        } else {
            1.0
        }
    };
    let saturation = scale();
    let exposure = scale();

    let (w, h) = image_dims(&sample.pixels);
    let mut pixels = if crop == (0.0, 0.0, 1.0, 1.0) && (w, h) == (out_w, out_h) {
        sample.pixels.clone()
    } else {
        resample_region(&sample.pixels, crop, out_w, out_h)
    };
    let mut boxes: Vec<BoxAnnotation> = sample.boxes.iter().filter_map(|b| recrop(b, crop)).collect();
    if flipped {
        pixels = flip_horizontal(&pixels);
        for b in &mut boxes {
            b.cx = 1.0 - b.cx;
        }
    }
    if hue_delta != 0.0 || saturation != 1.0 || exposure != 1.0 {
        adjust_hsv(&mut pixels, hue_delta, saturation, exposure);
    }
    let out = AnnotatedImage {
        pixels,
        boxes,
        is_hard_negative: sample.is_hard_negative,
    };
    let record = AugmentRecord {
        crop,
        flipped,
        hue_delta,
        saturation,
        exposure,
    };
    (out, record)
}

/// A uniformly drawn multiple of `stride` within `base·(1 ± jitter)`, or
/// `base` when no multiple fits.
pub fn choose_input_dim(base: usize, jitter: f64, stride: usize, rng: &mut impl Rng) -> usize {
    let c = input_dim_candidates(base, jitter, stride);
    if c.is_empty() {
        base
    } else {
        c[rng.gen_range(0..c.len())]
    }
}

pub fn input_dim_candidates(base: usize, jitter: f64, stride: usize) -> Vec<usize> {
    if stride == 0 {
        return Vec::new();
    }
    let lo = base as f64 * (1.0 - jitter);
    let hi = base as f64 * (1.0 + jitter);
    (1..)
        .map(|m| m * stride)
        .skip_while(|&d| (d as f64) < lo)
        .take_while(|&d| d as f64 <= hi)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> AnnotatedImage {
        let n = 3 * 16 * 16;
        AnnotatedImage {
            pixels: Tensor::from_vec(&[3, 16, 16], (0..n).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap(),
            boxes: vec![BoxAnnotation::new(1, 0.3, 0.5, 0.2, 0.4)],
            is_hard_negative: false,
        }
    }

    #[test]
    fn identity_config() {
        let s = sample();
        let (out, rec) = augment(&s, &AugmentationConfig::identity(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out, s);
        assert!(!rec.flipped);
    }

    #[test]
    fn forced_flip() {
        let cfg = AugmentationConfig {
            hflip_prob: 1.0,
            ..AugmentationConfig::identity()
        };
        let (out, _) = augment(&sample(), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = out.boxes[0];
        assert!((b.cx - 0.7).abs() < 1e-6 && b.w == 0.2 && b.h == 0.4);
    }

    #[test]
    fn candidates_for_416() {
        assert_eq!(input_dim_candidates(416, 0.3, 32), vec![320, 352, 384, 416, 448, 480, 512]);
        assert_eq!(input_dim_candidates(416, 0.0, 32), vec![416]);
        assert_eq!(choose_input_dim(416, 0.0, 32, &mut ChaCha8Rng::seed_from_u64(0)), 416);
        assert_eq!(choose_input_dim(10, 0.1, 32, &mut ChaCha8Rng::seed_from_u64(0)), 10);
    }
}
