//! Minimal 8-bit RGB raster used across the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width * height * 3).then_some(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(y, x, f(y, x));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `h × w` block whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> RgbImage {
        assert!(row + h <= self.height && col + w <= self.width, "crop out of bounds");
        let mut out = RgbImage::new(w, h);
        for r in 0..h {
            let src = ((row + r) * self.width + col) * 3;
            out.pixels[r * w * 3..(r + 1) * w * 3].copy_from_slice(&self.pixels[src..src + w * 3]);
        }
        out
    }

    /// Writes `tile` with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, tile: &RgbImage, row: usize, col: usize) {
        assert!(row + tile.height <= self.height && col + tile.width <= self.width);
        for r in 0..tile.height {
            let dst = ((row + r) * self.width + col) * 3;
            self.pixels[dst..dst + tile.width * 3]
                .copy_from_slice(&tile.pixels[r * tile.width * 3..(r + 1) * tile.width * 3]);
        }
    }

    /// Per-channel mean over all pixels.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        acc.map(|v| v as f64 / n)
    }

    pub fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
    }

    pub fn load_png(path: &Path) -> image::ImageResult<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            pixels: img.into_raw(),
        })
    }
}
