//! RGB image plus binary mask, with bounding boxes, resampling and PNG I/O.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

pub type Rgb8 = [u8; 3];

pub const WHITE: Rgb8 = [255, 255, 255];
pub const BLACK: Rgb8 = [0, 0, 0];

/// Mask values at or above this level count as set.
pub const MASK_THRESHOLD: u8 = 128;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn max_dim(&self) -> usize {
        self.width().max(self.height())
    }

    /// Continuous center in pixel-edge coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<Rgb8>,
    mask: Vec<bool>,
}

impl Raster {
    /// A `width x height` raster filled with `fill` and an empty mask.
    pub fn new(width: usize, height: usize, fill: Rgb8) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("raster must be at least 1x1, got {width}x{height}")));
        }
        Ok(Self {
            width,
            height,
            pixels: vec![fill; width * height],
            mask: vec![false; width * height],
        })
    }

    pub fn from_parts(width: usize, height: usize, pixels: Vec<Rgb8>, mask: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height || mask.len() != width * height {
            return Err(Error::shape(format!("buffers do not match a {width}x{height} raster")));
        }
        Ok(Self { width, height, pixels, mask })
    }

    /// Mask-only raster: white where set, black elsewhere.
    pub fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        let pixels = mask.iter().map(|&m| if m { WHITE } else { BLACK }).collect();
        Self::from_parts(width, height, pixels, mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb8] {
        &self.pixels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb8 {
        self.pixels[y * self.width + x]
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: Rgb8) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn set_mask(&mut self, x: usize, y: usize, on: bool) {
        self.mask[y * self.width + x] = on;
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn bbox(&self) -> Option<BBox> {
        bbox_of(self.width, self.height, |x, y| self.is_set(x, y))
    }

    pub fn same_dims(&self, other: &Raster) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "raster sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Sub-rectangle copy.
    pub fn crop(&self, b: BBox) -> Result<Raster> {
        if b.x1 > self.width || b.y1 > self.height || b.width() == 0 || b.height() == 0 {
            return Err(Error::shape("crop rectangle outside the raster"));
        }
        let mut out = Raster::new(b.width(), b.height(), WHITE)?;
        for y in 0..b.height() {
            for x in 0..b.width() {
                out.set_pixel(x, y, self.pixel(b.x0 + x, b.y0 + y));
                out.set_mask(x, y, self.is_set(b.x0 + x, b.y0 + y));
            }
        }
        Ok(out)
    }

    /// Replaces every unmasked pixel with `fill`.
    pub fn clear_unmasked(&mut self, fill: Rgb8) {
        for (p, &m) in self.pixels.iter_mut().zip(&self.mask) {
            if !m {
                *p = fill;
            }
        }
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(self.pixel(x as usize, y as usize))
        })
    }

    pub fn to_mask_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.is_set(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn save_rgb(&self, path: &Path) -> Result<()> {
        self.to_rgb_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_owned(), source })
    }

    pub fn save_mask(&self, path: &Path) -> Result<()> {
        self.to_mask_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.to_owned(), source })
    }

    /// Loads an RGB image with an empty mask.
    pub fn load_rgb(path: &Path) -> Result<Raster> {
        let img = open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.pixels().map(|p| p.0).collect();
        Raster::from_parts(w, h, pixels, vec![false; w * h])
    }

    /// Loads a grayscale mask; values >= 128 are set.
    pub fn load_mask(path: &Path) -> Result<Raster> {
        let img = open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mask = img.pixels().map(|p| p.0[0] >= MASK_THRESHOLD).collect();
        Raster::from_mask(w, h, mask)
    }

    /// Image from one file, mask from another.
    pub fn load_with_mask(image_path: &Path, mask_path: &Path) -> Result<Raster> {
        let mut r = Raster::load_rgb(image_path)?;
        let m = Raster::load_mask(mask_path)?;
        r.same_dims(&m)?;
        r.mask = m.mask;
        Ok(r)
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_owned(), source })
}

pub(crate) fn bbox_of(width: usize, height: usize, set: impl Fn(usize, usize) -> bool) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for y in 0..height {
        for x in 0..width {
            if set(x, y) {
                b = Some(match b {
                    None => BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                    Some(b) => BBox {
                        x0: b.x0.min(x),
                        y0: b.y0.min(y),
                        x1: b.x1.max(x + 1),
                        y1: b.y1.max(y + 1),
                    },
                });
            }
        }
    }
    b
}

/// Bilinear sample at continuous pixel-center coordinates, clamped at edges.
pub fn sample_bilinear(r: &Raster, fx: f64, fy: f64) -> Rgb8 {
    let max_x = (r.width - 1) as f64;
    let max_y = (r.height - 1) as f64;
    let fx = fx.clamp(0.0, max_x);
    let fy = fy.clamp(0.0, max_y);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(r.width - 1);
    let y1 = (y0 + 1).min(r.height - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |x: usize, y: usize| r.pixel(x, y)[c] as f64;
        let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
        let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
        *o = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Resizes to `new_w x new_h`: bilinear for the image, nearest for the mask.
/// Output pixel centers map to source positions `(x + 0.5) * w / new_w - 0.5`.
pub fn resize(r: &Raster, new_w: usize, new_h: usize) -> Result<Raster> {
    let mut out = Raster::new(new_w, new_h, WHITE)?;
    let sx = r.width as f64 / new_w as f64;
    let sy = r.height as f64 / new_h as f64;
    for y in 0..new_h {
        let cy = (y as f64 + 0.5) * sy;
        let ny = (cy.floor() as usize).min(r.height - 1);
        for x in 0..new_w {
            let cx = (x as f64 + 0.5) * sx;
            let nx = (cx.floor() as usize).min(r.width - 1);
            out.set_pixel(x, y, sample_bilinear(r, cx - 0.5, cy - 0.5));
            out.set_mask(x, y, r.is_set(nx, ny));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_and_center() {
        let mut r = Raster::new(10, 8, WHITE).unwrap();
        assert!(r.bbox().is_none());
        r.set_mask(2, 3, true);
        r.set_mask(5, 6, true);
        let b = r.bbox().unwrap();
        assert_eq!(b, BBox { x0: 2, y0: 3, x1: 6, y1: 7 });
        assert_eq!((b.width(), b.height()), (4, 4));
        assert_eq!(b.center(), (4.0, 5.0));
    }

    #[test]
    fn resize_identity_is_exact() {
        let mut r = Raster::new(5, 4, WHITE).unwrap();
        r.set_pixel(1, 2, [10, 20, 30]);
        r.set_mask(1, 2, true);
        assert_eq!(resize(&r, 5, 4).unwrap(), r);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Raster::new(6, 3, [1, 2, 3]).unwrap();
        r.set_mask(4, 1, true);
        r.set_pixel(4, 1, [200, 100, 0]);
        let ip = dir.path().join("img.png");
        let mp = dir.path().join("mask.png");
        r.save_rgb(&ip).unwrap();
        r.save_mask(&mp).unwrap();
        assert_eq!(Raster::load_with_mask(&ip, &mp).unwrap(), r);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Raster::load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
