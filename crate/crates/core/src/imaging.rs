//! Single-channel float images, bilinear resampling and raster file I/O.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::fsutil::{read_bytes, write_atomic};

/// Single-channel row-major image, values normally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Interleaved multi-channel raster with values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn from_gray(image: &ImageTensor) -> Self {
        Self {
            height: image.height,
            width: image.width,
            channels: 1,
            data: image.data.clone(),
        }
    }
}

/// Source coordinate and blend weight for half-pixel-centred resampling.
#[inline]
fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let cols: Vec<(usize, usize, f64)> = (0..width).map(|c| source_coord(c, width, image.width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, wr) = source_coord(r, height, image.height);
        for &(c0, c1, wc) in &cols {
            let top = lerp(image.get(r0, c0) as f64, image.get(r0, c1) as f64, wc);
            let bottom = lerp(image.get(r1, c0) as f64, image.get(r1, c1) as f64, wc);
            out.push(lerp(top, bottom, wr) as f32);
        }
    }
    ImageTensor {
        height,
        width,
        data: out,
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory(&bytes)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        other => (3, other.to_rgb32f().into_raw()),
    };
    Ok(Raster {
        height,
        width,
        channels,
        data,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[0,1]` image as binary 8-bit PGM (P5).
pub fn encode_pgm(image: &ImageTensor) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    encode_pgm_bytes(&bytes, image.width, image.height)
}

pub(crate) fn encode_pgm_bytes(bytes: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(bytes, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(out)
}

pub fn save_pgm(path: &Path, image: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_pgm(image)?)
}

pub fn load_gray(path: &Path) -> Result<ImageTensor> {
    let raster = load_raster(path)?;
    if raster.channels != 1 {
        return Err(Error::invalid(format!("{} is not single-channel", path.display())));
    }
    ImageTensor::new(raster.height, raster.width, raster.data)
}

/// Encodes 8-bit interleaved RGB as PNG.
pub fn encode_rgb_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    PngEncoder::new(&mut out).write_image(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_to_single_pixel_averages() {
        let img = ImageTensor::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 1, 1);
        assert!((out.get(0, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ImageTensor::from_fn(17, 13, |r, c| ((r * 31 + c * 7) % 11) as f32 / 10.0);
        assert!(resize_bilinear(&img, 17, 13).max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(5, 7, |r, c| ((r * 7 + c) as f32) / 34.0);
        let path = dir.path().join("x.pgm");
        save_pgm(&path, &img).unwrap();
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
        let back = load_gray(&path).unwrap();
        assert_eq!((back.height(), back.width()), (5, 7));
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }
}
