use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::DataError;
use crate::real::Real;
use crate::tensor::Tensor;

const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Decodes a PNG or binary PGM into `[channels × size × size]` with values in `[0, 1]`.
///
/// RGB to gray uses 0.299/0.587/0.114; gray to RGB replicates the plane.
/// Resizing is corner-aligned bilinear.
pub fn load_image<T: Real>(
    path: &Path,
    size: usize,
    channels: usize,
) -> Result<Tensor<T>, DataError> {
    let decode_err = |msg: String| DataError::Decode {
        path: path.to_path_buf(),
        msg,
    };
    let img = ImageReader::open(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let planes = planes_from(&img, channels).map_err(decode_err)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(channels * size * size);
    for plane in &planes {
        let resized = resize_bilinear(plane, h, w, size, size);
        data.extend(resized.into_iter().map(|v| T::lit(v / 255.0)));
    }
    Ok(Tensor::new(vec![channels, size, size], data).expect("planes sized by construction"))
}

fn planes_from(img: &DynamicImage, channels: usize) -> Result<Vec<Vec<f64>>, String> {
    let color = img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    match (color, channels) {
        (false, 1) => Ok(vec![img.to_luma8().iter().map(|v| *v as f64).collect()]),
        (false, 3) => {
            let gray: Vec<f64> = img.to_luma8().iter().map(|v| *v as f64).collect();
            Ok(vec![gray.clone(), gray.clone(), gray])
        }
        (true, 1) => {
            let rgb = img.to_rgb8();
            Ok(vec![rgb
                .pixels()
                .map(|p| {
                    LUMA_WEIGHTS
                        .iter()
                        .zip(p.0)
                        .map(|(w, c)| w * c as f64)
                        .sum()
                })
                .collect()])
        }
        (true, 3) => {
            let rgb = img.to_rgb8();
            let mut planes = vec![Vec::with_capacity(w * h); 3];
            for p in rgb.pixels() {
                for (plane, c) in planes.iter_mut().zip(p.0) {
                    plane.push(c as f64);
                }
            }
            Ok(planes)
        }
        (_, c) => Err(format!("unsupported channel count {c}")),
    }
}

/// Corner-aligned bilinear resampling: output corners land exactly on input
/// corners, so constants and the four corner values are preserved.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out <= 1 || inp <= 1 {
            return (0, 0, 0.0);
        }
        let x = o as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let x0 = (x.floor() as usize).min(inp - 1);
        let x1 = (x0 + 1).min(inp - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)
}
