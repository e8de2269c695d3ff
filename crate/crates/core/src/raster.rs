//! Grayscale raster images.
//!
//! Every image in the pipeline (source formula, rendered hypothesis, cropped
//! regions) is an 8-bit grayscale buffer. Color inputs are flattened onto a
//! white background and reduced to the mean of their RGB channels on load.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat};

use crate::error::{Error, Result};

pub const WHITE: u8 = 255;

#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    dpi: Option<u32>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("dpi", &self.dpi)
            .finish_non_exhaustive()
    }
}

/// Pixel rectangle, half-open on the right and bottom edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            dpi: None,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn white(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, WHITE)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(row, col));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn with_dpi(mut self, dpi: u32) -> Self {
        self.dpi = Some(dpi);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dpi(&self) -> Option<u32> {
        self.dpi
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    /// Copies a sub-rectangle. The rectangle must be non-empty and inside the image.
    pub fn crop(&self, rect: PixelRect) -> Result<Self> {
        if rect.is_empty() || rect.right > self.width || rect.bottom > self.height {
            return Err(Error::InvalidImage(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(rect.width() * rect.height());
        for row in rect.top..rect.bottom {
            pixels.extend_from_slice(&self.row(row)[rect.left..rect.right]);
        }
        let mut out = Self::new(rect.width(), rect.height(), pixels)?;
        out.dpi = self.dpi;
        Ok(out)
    }

    /// Places this image top-left on a white canvas of at least the given size.
    pub fn pad_to(&self, width: usize, height: usize) -> Self {
        let width = width.max(self.width);
        let height = height.max(self.height);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut pixels = vec![WHITE; width * height];
        for row in 0..self.height {
            pixels[row * width..row * width + self.width].copy_from_slice(self.row(row));
        }
        Self {
            width,
            height,
            pixels,
            dpi: self.dpi,
        }
    }

    /// Surrounds the image with a uniform white border.
    pub fn with_margin(&self, margin: usize) -> Self {
        let width = self.width + 2 * margin;
        let height = self.height + 2 * margin;
        let mut pixels = vec![WHITE; width * height];
        for row in 0..self.height {
            let start = (row + margin) * width + margin;
            pixels[start..start + self.width].copy_from_slice(self.row(row));
        }
        Self {
            width,
            height,
            pixels,
            dpi: self.dpi,
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let rgba = img.to_rgba8();
        let (w, h) = rgba.dimensions();
        let pixels = rgba
            .pixels()
            .map(|p| {
                let [r, g, b, a] = p.0;
                let alpha = a as f64 / 255.0;
                let mean = (r as f64 + g as f64 + b as f64) / 3.0;
                (alpha * mean + (1.0 - alpha) * 255.0).round() as u8
            })
            .collect();
        Self::new(w as usize, h as usize, pixels)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Self::from_dynamic(&img)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)?;
        Self::from_dynamic(&img)
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_gray_image().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(RasterImage::new(0, 3, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn crop_copies_rows() {
        let img = RasterImage::from_fn(4, 3, |r, c| (r * 10 + c) as u8).unwrap();
        let crop = img
            .crop(PixelRect {
                left: 1,
                top: 1,
                right: 3,
                bottom: 3,
            })
            .unwrap();
        assert_eq!(crop.pixels(), &[11, 12, 21, 22]);
    }

    #[test]
    fn pad_anchors_top_left() {
        let img = RasterImage::filled(2, 1, 0).unwrap();
        let padded = img.pad_to(3, 2);
        assert_eq!(padded.pixels(), &[0, 0, 255, 255, 255, 255]);
    }

    #[test]
    fn png_round_trip() {
        let img = RasterImage::from_fn(5, 7, |r, c| (r * 31 + c * 7) as u8).unwrap();
        let back = RasterImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn transparent_pixels_flatten_to_white() {
        let mut rgba = image::RgbaImage::new(2, 1);
        rgba.put_pixel(0, 0, image::Rgba([0, 0, 0, 0]));
        rgba.put_pixel(1, 0, image::Rgba([30, 60, 90, 255]));
        let img = RasterImage::from_dynamic(&DynamicImage::ImageRgba8(rgba)).unwrap();
        assert_eq!(img.pixels(), &[255, 60]);
    }
}
