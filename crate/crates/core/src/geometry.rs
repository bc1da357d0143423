/// Axis-aligned box in center form. Coordinates are usually normalized to
/// the image (0..1) but nothing here depends on that.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &Rect) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.corners();
        let (bx0, by0, bx1, by1) = other.corners();
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        w * h
    }

    /// Intersection over union, 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &Rect) -> f64 {
        if self == other && self.area() > 0.0 {
            return 1.0;
        }
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// IoU of the two shapes placed on a common center.
    pub fn shape_iou(w0: f64, h0: f64, w1: f64, h1: f64) -> f64 {
        let inter = w0.min(w1) * h0.min(h1);
        let union = w0 * h0 + w1 * h1 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    a.iou(b)
}

/// One predicted box with its most likely class and that class's
/// probability (objectness × class probability).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub rect: Rect,
    pub probability: f32,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_disjoint_and_corner_cases() {
        let a = Rect::new(0.5, 0.5, 0.2, 0.4);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&Rect::new(0.9, 0.9, 0.1, 0.1)), 0.0);
        let p = Rect::from_corners(0.0, 0.0, 2.0, 2.0);
        let q = Rect::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((p.iou(&q) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn co_centered_shapes() {
        assert_eq!(Rect::shape_iou(1.0, 2.0, 1.0, 2.0), 1.0);
        assert!((Rect::shape_iou(1.0, 1.0, 2.0, 2.0) - 0.25).abs() < 1e-12);
    }
}
