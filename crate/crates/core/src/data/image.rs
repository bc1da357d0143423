//! `[3, H, W]` RGB images with values in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value used for pixels sampled outside the source image.
pub const FILL: f32 = 0.5;

pub fn image_dims(image: &Tensor) -> (usize, usize) {
    let s = image.shape();
    (s[2], s[1])
}

/// Rounds every value to the nearest multiple of 1/255, as stored on disk.
pub fn quantize(image: &mut Tensor) {
    for v in image.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Loads an 8-bit gray, gray+alpha, RGB or RGBA PNG. Alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::data(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::data(format!("{}: unexpanded palette image", path.display())))
        }
    };
    let mut data = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = &buf[y * info.line_size + x * channels..];
            for c in 0..3 {
                let v = if channels < 3 { px[0] } else { px[c] };
                data[(c * h + y) * w + x] = v as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes an 8-bit RGB PNG. Values are clamped and rounded to 1/255.
pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = image_dims(image);
    let d = image.data();
    let mut buf = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| Error::data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(&buf).map_err(bad)?;
    writer.finish().map_err(bad)
}

/// Resamples the region `(x0, y0)–(x1, y1)` (fractions of the source size,
/// may reach outside it) to `out_w × out_h` with bilinear interpolation.
/// Outside the source the value is [`FILL`].
pub fn resample_region(image: &Tensor, region: (f64, f64, f64, f64), out_w: usize, out_h: usize) -> Tensor {
    let (w, h) = image_dims(image);
    let (x0, y0, x1, y1) = region;
    let src = image.data();
    let sx = (x1 - x0) * w as f64 / out_w as f64;
    let sy = (y1 - y0) * h as f64 / out_h as f64;
    let mut out = vec![0.0f32; 3 * out_w * out_h];
    let taps = |pos: f64, len: usize| -> [(Option<usize>, f32); 2] {
        let f = pos.floor();
        let t = (pos - f) as f32;
        let i = f as i64;
        let at = |k: i64| (k >= 0 && (k as usize) < len).then_some(k as usize);
        [(at(i), 1.0 - t), (at(i + 1), t)]
    };
    for oy in 0..out_h {
        let py = y0 * h as f64 + (oy as f64 + 0.5) * sy - 0.5;
        let ty = taps(py, h);
        for ox in 0..out_w {
            let px = x0 * w as f64 + (ox as f64 + 0.5) * sx - 0.5;
            let tx = taps(px, w);
            for c in 0..3 {
                let mut v = 0.0f32;
                for &(yy, wy) in &ty {
                    if wy == 0.0 {
                        continue;
                    }
                    for &(xx, wx) in &tx {
                        if wx == 0.0 {
                            continue;
                        }
                        let s = match (yy, xx) {
                            (Some(yy), Some(xx)) => src[(c * h + yy) * w + xx],
                            _ => FILL,
                        };
                        v += wy * wx * s;
                    }
                }
                out[(c * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    Tensor::from_vec(&[3, out_h, out_w], out).expect("non-empty output")
}

pub fn resize_bilinear(image: &Tensor, out_w: usize, out_h: usize) -> Tensor {
    let (w, h) = image_dims(image);
    if (w, h) == (out_w, out_h) {
        return image.clone();
    }
    resample_region(image, (0.0, 0.0, 1.0, 1.0), out_w, out_h)
}

/// Mirror around the vertical axis.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (w, h) = image_dims(image);
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
    out
}
