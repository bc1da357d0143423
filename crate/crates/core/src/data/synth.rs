//! Procedural "product box" scenes with exact annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Rect;
use crate::tensor::Tensor;

use super::color::hsv_to_rgb;
use super::image::quantize;
use super::{AnnotatedImage, BoxAnnotation};

const PLACEMENT_ATTEMPTS: usize = 100;
const MAX_PAIR_IOU: f64 = 0.3;

/// How planted boxes are painted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Palette {
    /// Each class has a fixed color and stripe layout.
    Brands,
    /// Every box gets a random color and a random pattern; all boxes are
    /// class 0. Used for pretraining.
    Generic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    Checker,
}

/// Visual identity of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSignature {
    pub hue: f32,
    pub pattern: Pattern,
    pub stripes: usize,
}

pub fn class_signature(class_id: usize) -> ClassSignature {
    let pattern = match class_id % 3 {
        0 => Pattern::HorizontalStripes,
        1 => Pattern::VerticalStripes,
        _ => Pattern::Checker,
    };
    ClassSignature {
        hue: (class_id as f32 * 0.37).fract(),
        pattern,
        stripes: 2 + (class_id / 3) % 3,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    /// Class of each box to plant.
    pub box_classes: Vec<usize>,
    /// Untextured rectangles that carry no annotation.
    pub distractors: usize,
    /// Box side range as a fraction of the canvas side.
    pub min_size: f64,
    pub max_size: f64,
    pub palette: Palette,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        SyntheticSceneSpec {
            width,
            height,
            box_classes: Vec::new(),
            distractors: 0,
            min_size: 0.2,
            max_size: 0.45,
            palette: Palette::Brands,
            seed,
        }
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct PixelRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl PixelRect {
    fn rect(&self) -> Rect {
        Rect::from_corners(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }
}

fn place(spec: &SyntheticSceneSpec, taken: &[PixelRect], rng: &mut ChaCha8Rng) -> Option<PixelRect> {
    let (w, h) = (spec.width, spec.height);
    let side = |len: usize, rng: &mut ChaCha8Rng| {
        let lo = ((spec.min_size * len as f64).round() as usize).max(2).min(len);
        let hi = ((spec.max_size * len as f64).round() as usize).clamp(lo, len);
        rng.gen_range(lo..=hi)
    };
    for _ in 0..PLACEMENT_ATTEMPTS {
        let bw = side(w, rng);
        let bh = side(h, rng);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let r = PixelRect {
            x0,
            y0,
            x1: x0 + bw,
            y1: y0 + bh,
        };
        if taken.iter().all(|t| t.rect().iou(&r.rect()) < MAX_PAIR_IOU) {
            return Some(r);
        }
    }
    None
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, rgb: (f32, f32, f32)) {
        let plane = self.w * self.h;
        let i = y * self.w + x;
        self.data[i] = rgb.0;
        self.data[plane + i] = rgb.1;
        self.data[2 * plane + i] = rgb.2;
    }

    fn fill(&mut self, r: PixelRect, rgb: (f32, f32, f32)) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.set(x, y, rgb);
            }
        }
    }

    fn pattern(&mut self, r: PixelRect, sig: ClassSignature, base: (f32, f32, f32), ink: (f32, f32, f32)) {
        let (bw, bh) = ((r.x1 - r.x0) as f32, (r.y1 - r.y0) as f32);
        let n = sig.stripes as f32;
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let u = ((x - r.x0) as f32 + 0.5) / bw;
                let v = ((y - r.y0) as f32 + 0.5) / bh;
                let band = |t: f32| ((t * (2.0 * n)) as usize) % 2 == 1;
                let on = match sig.pattern {
                    Pattern::HorizontalStripes => band(v),
                    Pattern::VerticalStripes => band(u),
                    Pattern::Checker => band(u) ^ band(v),
                };
                self.set(x, y, if on { ink } else { base });
            }
        }
        // one-pixel dark outline
        let edge = (base.0 * 0.3, base.1 * 0.3, base.2 * 0.3);
        for x in r.x0..r.x1 {
            self.set(x, r.y0, edge);
            self.set(x, r.y1 - 1, edge);
        }
        for y in r.y0..r.y1 {
            self.set(r.x0, y, edge);
            self.set(r.x1 - 1, y, edge);
        }
    }
}

/// Renders one scene. Boxes are kept fully inside the canvas with pairwise
/// IoU below 0.3 (distractors included); boxes that cannot be placed in 100
/// attempts are dropped with a warning. Distractors are painted first so
/// they never cover a planted box.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> AnnotatedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut canvas = Canvas {
        w,
        h,
        data: vec![0.0; 3 * w * h],
    };
    // Low-saturation background with a gentle vertical gradient.
    let bg_hue = rng.gen::<f32>();
    let bg_val = rng.gen_range(0.35..0.65f32);
    for y in 0..h {
        let v = bg_val + 0.1 * (y as f32 / h as f32 - 0.5);
        let rgb = hsv_to_rgb(bg_hue, 0.12, v);
        for x in 0..w {
            canvas.set(x, y, rgb);
        }
    }

    let mut taken = Vec::new();
    let mut planted = Vec::new();
    for &class_id in &spec.box_classes {
        match place(spec, &taken, &mut rng) {
            Some(r) => {
                taken.push(r);
                planted.push((class_id, r));
            }
            None => log::warn!("scene {}: could not place a box of class {class_id}", spec.seed),
        }
    }
    let mut distractors = Vec::new();
    for _ in 0..spec.distractors {
        if let Some(r) = place(spec, &taken, &mut rng) {
            taken.push(r);
            distractors.push(r);
        }
    }
    for r in distractors {
        let rgb = hsv_to_rgb(rng.gen(), rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.95));
        canvas.fill(r, rgb);
    }

    let mut boxes = Vec::with_capacity(planted.len());
    for &(class_id, r) in &planted {
        let (sig, value) = match spec.palette {
            Palette::Brands => (class_signature(class_id), 0.85),
            Palette::Generic => {
                let pattern = match rng.gen_range(0..3) {
                    0 => Pattern::HorizontalStripes,
                    1 => Pattern::VerticalStripes,
                    _ => Pattern::Checker,
                };
                let sig = ClassSignature {
                    hue: rng.gen(),
                    pattern,
                    stripes: rng.gen_range(2..=4),
                };
                (sig, rng.gen_range(0.6..0.95))
            }
        };
        let base = hsv_to_rgb(sig.hue, 0.75, value);
        let ink = hsv_to_rgb((sig.hue + 0.5).fract(), 0.6, value * 0.45);
        canvas.pattern(r, sig, base, ink);
        let class_id = if spec.palette == Palette::Generic { 0 } else { class_id };
        let rect = r.rect();
        boxes.push(BoxAnnotation::new(
            class_id,
            (rect.cx / w as f64) as f32,
            (rect.cy / h as f64) as f32,
            (rect.w / w as f64) as f32,
            (rect.h / h as f64) as f32,
        ));
    }

    let mut pixels = Tensor::from_vec(&[3, h, w], canvas.data).expect("canvas is non-empty");
    quantize(&mut pixels);
    AnnotatedImage {
        is_hard_negative: boxes.is_empty(),
        pixels,
        boxes,
    }
}
