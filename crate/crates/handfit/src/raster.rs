//! Image plumbing: PNG round-trips (8-bit color, 8-bit gray, 1-bit masks),
//! luma conversion, and the fixed Gaussian/Sobel filters.
//!
//! In-memory images are f64 tensors `[h,w,c]` with values in [0,1]; the u8
//! convention is `k/255`.

use crate::handprior::Mask;
use crate::tensor::{filter2d_clamp, Tensor};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {message}")]
    Png { path: String, message: String },
    #[error("image {path} has {got} channels, expected {want}")]
    ChannelMismatch { path: String, got: usize, want: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> RasterError {
    RasterError::Io { path: path.display().to_string(), source }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> RasterError {
    RasterError::Png { path: path.display().to_string(), message: e.to_string() }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(k: u8) -> f64 {
    k as f64 / 255.0
}

/// Snap every channel onto the u8 grid. Generator output goes through this so
/// PNG round-trips reproduce the in-memory values exactly.
pub fn quantize_u8(img: &Tensor) -> Tensor {
    img.map(|v| from_u8(to_u8(v)))
}

pub fn write_rgb_png(path: &Path, img: &Tensor) -> Result<(), RasterError> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert_eq!(c, 3, "write_rgb_png wants [h,w,3]");
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let im = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    im.save(path).map_err(|e| png_err(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor, RasterError> {
    let im = image::open(path).map_err(|e| png_err(path, e))?.to_rgb8();
    let (w, h) = im.dimensions();
    let data = im.into_raw().into_iter().map(from_u8).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data))
}

pub fn write_rgba_png(path: &Path, img: &Tensor) -> Result<(), RasterError> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert_eq!(c, 4, "write_rgba_png wants [h,w,4]");
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let im = image::RgbaImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    im.save(path).map_err(|e| png_err(path, e))
}

pub fn read_rgba_png(path: &Path) -> Result<Tensor, RasterError> {
    let im = image::open(path).map_err(|e| png_err(path, e))?.to_rgba8();
    let (w, h) = im.dimensions();
    let data = im.into_raw().into_iter().map(from_u8).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 4], data))
}

pub fn write_gray_png(path: &Path, img: &Tensor) -> Result<(), RasterError> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let c = if img.shape().len() == 3 { img.shape()[2] } else { 1 };
    assert_eq!(c, 1, "write_gray_png wants [h,w] or [h,w,1]");
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let im = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    im.save(path).map_err(|e| png_err(path, e))
}

pub fn read_gray_png(path: &Path) -> Result<Tensor, RasterError> {
    let im = image::open(path).map_err(|e| png_err(path, e))?.to_luma8();
    let (w, h) = im.dimensions();
    let data = im.into_raw().into_iter().map(from_u8).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 1], data))
}

/// Masks are written as true 1-bit grayscale PNGs (MSB-first packed rows).
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<(), RasterError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let wbuf = std::io::BufWriter::new(file);
    let mut enc = png::Encoder::new(wbuf, mask.w as u32, mask.h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let row_bytes = mask.w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * mask.h];
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&packed).map_err(|e| png_err(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask, RasterError> {
    let im = image::open(path).map_err(|e| png_err(path, e))?.to_luma8();
    let (w, h) = im.dimensions();
    let mut mask = Mask::new(h as usize, w as usize);
    for y in 0..h {
        for x in 0..w {
            if im.get_pixel(x, y).0[0] > 127 {
                mask.set(y as usize, x as usize, true);
            }
        }
    }
    Ok(mask)
}

/// BT.601 luma weights; shared with the differentiable graph op.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn rgb_to_gray(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    assert_eq!(img.shape()[2], 3);
    let mut out = vec![0.0; h * w];
    for p in 0..h * w {
        out[p] = LUMA_WEIGHTS[0] * img.data()[p * 3]
            + LUMA_WEIGHTS[1] * img.data()[p * 3 + 1]
            + LUMA_WEIGHTS[2] * img.data()[p * 3 + 2];
    }
    Tensor::new(&[h, w], out)
}

/// Sampled, normalized 1D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with replicate borders: horizontal pass then
/// vertical pass, matching two chained `filter2d` graph ops exactly.
pub fn gaussian_blur(gray: &Tensor, sigma: f64) -> Tensor {
    let k = gaussian_kernel_1d(sigma);
    let kh = Tensor::new(&[1, k.len()], k.clone());
    let kv = Tensor::new(&[k.len(), 1], k);
    filter2d_clamp(&filter2d_clamp(gray, &kh), &kv)
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Sobel gradient pair with replicate borders. Each component is a difference
/// of two identically shaped sums, so a constant image yields exact zeros
/// instead of accumulation-order residue.
pub fn sobel_gradients(gray: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray.data()[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let right = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1);
            let left = at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1);
            let bot = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
            let top = at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1);
            gx[(y * w as isize + x) as usize] = right - left;
            gy[(y * w as isize + x) as usize] = bot - top;
        }
    }
    (Tensor::new(&[h, w], gx), Tensor::new(&[h, w], gy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    #[test]
    fn rgb_png_roundtrip_is_exact_on_u8_grid() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let img = quantize_u8(&Tensor::new(
            &[9, 7, 3],
            (0..9 * 7 * 3).map(|_| rng.gen::<f64>()).collect(),
        ));
        let path = dir.path().join("t.png");
        write_rgb_png(&path, &img).unwrap();
        let back = read_rgb_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_png_roundtrip_is_exact() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        // odd width exercises row padding
        let mask = Mask::from_fn(13, 11, |_, _| rng.gen::<f64>() < 0.4);
        let path = dir.path().join("m.png");
        write_mask_png(&path, &mask).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel_1d(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() / 2 {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::filled(&[8, 8], 0.37);
        let b = gaussian_blur(&img, 1.5);
        for &v in b.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn sobel_on_horizontal_ramp() {
        // f(y,x) = x: gx should be 8 (sum of kernel weights times step), gy 0
        let img = Tensor::new(&[6, 6], (0..36).map(|i| (i % 6) as f64).collect());
        let (gx, gy) = sobel_gradients(&img);
        // interior pixels only; borders are affected by clamping
        for y in 1..5 {
            for x in 1..5 {
                assert!((gx.data()[y * 6 + x] - 8.0).abs() < 1e-12);
                assert!(gy.data()[y * 6 + x].abs() < 1e-12);
            }
        }
    }
}
