//! In-context input composition and attention heatmaps.

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::raster::{Raster, Rgb8};

/// Fill for blanked scene regions.
pub const NEUTRAL_GRAY: Rgb8 = [128, 128, 128];

/// Grays out `source_mask ∪ target_mask` in `scene`. The returned raster's
/// mask is that union.
pub fn prepare_masked_scene(scene: &Raster, source_mask: &Raster, target_mask: &Raster) -> Result<Raster> {
    scene.same_dims(source_mask)?;
    scene.same_dims(target_mask)?;
    let mask: Vec<bool> = source_mask
        .mask()
        .iter()
        .zip(target_mask.mask())
        .map(|(&a, &b)| a || b)
        .collect();
    let pixels = scene
        .pixels()
        .iter()
        .zip(&mask)
        .map(|(&p, &m)| if m { NEUTRAL_GRAY } else { p })
        .collect();
    Raster::from_parts(scene.width(), scene.height(), pixels, mask)
}

/// Side-by-side model input: `[reference | scene]` plus its paired mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InContextPair {
    composite: Raster,
    pair_mask: Raster,
    t: usize,
}

impl InContextPair {
    pub fn resolution(&self) -> usize {
        self.t
    }

    /// `2T x T` image; its mask equals `pair_mask`.
    pub fn composite(&self) -> &Raster {
        &self.composite
    }

    /// `2T x T`, empty over the reference half.
    pub fn pair_mask(&self) -> &Raster {
        &self.pair_mask
    }

    /// Recovers `(reference, scene)` by cutting at `x = T`.
    pub fn split(&self) -> (Raster, Raster) {
        let t = self.t;
        let half = |x0: usize| {
            let mut out = Raster::new(t, t, [0; 3]).expect("T is positive");
            for y in 0..t {
                for x in 0..t {
                    out.set_pixel(x, y, self.composite.pixel(x0 + x, y));
                }
            }
            out
        };
        (half(0), half(t))
    }
}

pub fn compose_incontext(reference: &Raster, masked_scene: &Raster, target_mask: &Raster) -> Result<InContextPair> {
    let t = reference.width();
    if reference.height() != t {
        return Err(Error::shape(format!(
            "reference must be square, got {}x{}",
            reference.width(),
            reference.height()
        )));
    }
    reference.same_dims(masked_scene)?;
    reference.same_dims(target_mask)?;
    let w = 2 * t;
    let mut pixels = Vec::with_capacity(w * t);
    let mut mask = Vec::with_capacity(w * t);
    for y in 0..t {
        for x in 0..t {
            pixels.push(reference.pixel(x, y));
            mask.push(false);
        }
        for x in 0..t {
            pixels.push(masked_scene.pixel(x, y));
            mask.push(target_mask.is_set(x, y));
        }
    }
    let pair_mask = Raster::from_mask(w, t, mask.clone())?;
    let composite = Raster::from_parts(w, t, pixels, mask)?;
    Ok(InContextPair { composite, pair_mask, t })
}

const fn heat_entry(i: usize) -> Rgb8 {
    let v = i * 3;
    let r = if v > 255 { 255 } else { v };
    let g = if v < 255 { 0 } else if v > 510 { 255 } else { v - 255 };
    let b = v.saturating_sub(510);
    [r as u8, g as u8, b as u8]
}

const fn build_ramp() -> [Rgb8; 256] {
    let mut out = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        out[i] = heat_entry(i);
        i += 1;
    }
    out
}

/// Black through red and yellow to white; channel sums strictly increase.
pub const COLOR_RAMP: [Rgb8; 256] = build_ramp();

pub fn ramp_color(v: f64) -> Rgb8 {
    let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    COLOR_RAMP[idx]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    /// Max-normalizes `raw` (row-major). An all-zero input stays zero.
    pub fn from_values(width: usize, height: usize, raw: &[f64]) -> Result<Self> {
        if width == 0 || height == 0 || raw.len() != width * height {
            return Err(Error::shape(format!(
                "{} values do not fill a {height}x{width} layout",
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("heatmap values must be finite and nonnegative"));
        }
        let max = raw.iter().copied().fold(0.0, f64::max);
        let values = if max > 0.0 { raw.iter().map(|v| v / max).collect() } else { raw.to_vec() };
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mean over the given row-major cell indices.
    pub fn mean_over(&self, cells: &[usize]) -> f64 {
        if cells.is_empty() {
            return 0.0;
        }
        cells.iter().map(|&i| self.values[i]).sum::<f64>() / cells.len() as f64
    }

    /// Color-ramped raster with each cell drawn as a `cell x cell` block.
    pub fn render(&self, cell: usize) -> Result<Raster> {
        if cell == 0 {
            return Err(Error::domain("cell size must be positive"));
        }
        let mut out = Raster::new(self.width * cell, self.height * cell, [0; 3])?;
        for y in 0..self.height * cell {
            for x in 0..self.width * cell {
                out.set_pixel(x, y, ramp_color(self.value(x / cell, y / cell)));
            }
        }
        Ok(out)
    }
}

/// Reshapes column `key` of `map` to `layout = (h, w)` and normalizes it.
pub fn attention_heatmap(map: &AttentionMap, key: usize, layout: (usize, usize)) -> Result<Heatmap> {
    let (h, w) = layout;
    if h * w != map.n_queries() {
        return Err(Error::shape(format!(
            "layout {h}x{w} does not match {} queries",
            map.n_queries()
        )));
    }
    let col = map.column(key)?;
    Heatmap::from_values(w, h, col.as_slice())
}

pub fn heatmap_file_name(stem: &str, strategy: &str, key: usize) -> String {
    format!("{stem}__{strategy}__k{key}.png")
}
