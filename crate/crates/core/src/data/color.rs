//! RGB ↔ HSV and the photometric augmentations.

use crate::tensor::Tensor;

/// `(h, s, v)` with `h ∈ [0, 1)`; gray pixels get `h = 0`, `s = 0`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta <= 0.0 || max <= 0.0 {
        return (0.0, 0.0, v);
    }
    let s = delta / max;
    let mut h = if r == max {
        (g - b) / delta
    } else if g == max {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    } / 6.0;
    if h < 0.0 {
        h += 1.0;
    }
    if h >= 1.0 {
        h -= 1.0;
    }
    (h, s, v)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    if s <= 0.0 {
        return (v, v, v);
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// `(h + a) mod 1`, always in `[0, 1)`.
pub fn wrap_hue(h: f32, delta: f32) -> f32 {
    let x = (h + delta).rem_euclid(1.0);
    if x >= 1.0 {
        0.0
    } else {
        x
    }
}

/// Adds `hue_delta` to the hue (wrapping), multiplies saturation by
/// `saturation` and value by `exposure`, and clamps the result to `[0, 1]`.
pub fn adjust_hsv(image: &mut Tensor, hue_delta: f32, saturation: f32, exposure: f32) {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data_mut();
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
        let h = if s > 0.0 { wrap_hue(h, hue_delta) } else { h };
        let s = (s * saturation).clamp(0.0, 1.0);
        let v = (v * exposure).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        d[i] = r.clamp(0.0, 1.0);
        d[plane + i] = g.clamp(0.0, 1.0);
        d[2 * plane + i] = b.clamp(0.0, 1.0);
    }
}

/// Hue rotation only; saturation and value are left as they are.
pub fn hue_shift(image: &Tensor, delta: f32) -> Tensor {
    let mut out = image.clone();
    adjust_hsv(&mut out, delta, 1.0, 1.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_tolerance() {
        for i in 0..1000 {
            let r = (i * 37 % 101) as f32 / 100.0;
            let g = (i * 53 % 103) as f32 / 102.0;
            let b = (i * 71 % 107) as f32 / 106.0;
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn wrap() {
        assert!((wrap_hue(0.95, 0.08) - 0.03).abs() < 1e-6);
        assert!((wrap_hue(0.02, -0.05) - 0.97).abs() < 1e-6);
    }

    #[test]
    fn gray_is_fixed() {
        let img = Tensor::full(&[3, 2, 2], 0.4);
        assert_eq!(hue_shift(&img, 0.1), img);
    }

    #[test]
    fn shift_moves_hue() {
        let img = Tensor::from_vec(&[3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let out = hue_shift(&img, 1.0 / 3.0);
        let d = out.data();
        assert!(d[0].abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6 && d[2].abs() < 1e-6);
    }
}
