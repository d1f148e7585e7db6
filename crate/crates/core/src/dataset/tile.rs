//! Sliding-window tiling for high-resolution inspection images.
//!
//! Windows slide left to right and top to bottom with a fixed fractional
//! overlap. The last window on each axis is clamped to the image edge so it
//! never reaches past real pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    pub max_side: u32,
    pub overlap_fraction: f64,
    pub min_keep_fraction: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            max_side: 1024,
            overlap_fraction: 0.2,
            min_keep_fraction: 0.2,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_side == 0 {
            return Err(Error::Config("tile.max_side must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "tile.overlap_fraction must lie in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if !(self.min_keep_fraction > 0.0 && self.min_keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "tile.min_keep_fraction must lie in (0, 1], got {}",
                self.min_keep_fraction
            )));
        }
        Ok(())
    }

    /// Distance between consecutive window origins.
    pub fn stride(&self) -> u32 {
        let s = (self.max_side as f64 * (1.0 - self.overlap_fraction)).floor() as u32;
        s.max(1)
    }
}

/// A window into the source image, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

/// Window origins along one axis of length `len`.
pub fn axis_offsets(len: u32, spec: &TileSpec) -> Vec<u32> {
    let window = spec.max_side;
    if len <= window {
        return vec![0];
    }
    let stride = spec.stride();
    let mut offsets = Vec::new();
    let mut off = 0u32;
    loop {
        if off + window >= len {
            offsets.push(len - window);
            break;
        }
        offsets.push(off);
        off += stride;
    }
    offsets.dedup();
    offsets
}

/// Computes the tile windows for an image of the given size.
///
/// Images that fit inside a single window on both axes come back as one
/// identity tile regardless of how small they are. Otherwise tiles with a
/// side shorter than `min_keep_fraction * max_side` are dropped.
pub fn tile_rects(width: u32, height: u32, spec: &TileSpec) -> Vec<TileRect> {
    if width == 0 || height == 0 {
        return Vec::new();
    }
    if width <= spec.max_side && height <= spec.max_side {
        return vec![TileRect {
            x: 0,
            y: 0,
            width,
            height,
        }];
    }
    let min_side = spec.min_keep_fraction * spec.max_side as f64;
    let tw = width.min(spec.max_side);
    let th = height.min(spec.max_side);
    if (tw as f64) < min_side || (th as f64) < min_side {
        return Vec::new();
    }
    let xs = axis_offsets(width, spec);
    let ys = axis_offsets(height, spec);
    let mut rects = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            rects.push(TileRect {
                x,
                y,
                width: tw,
                height: th,
            });
        }
    }
    rects
}

/// Cuts `image` into tiles. Works for any `image` pixel type.
pub fn tile_image<P>(
    image: &image::ImageBuffer<P, Vec<P::Subpixel>>,
    spec: &TileSpec,
) -> Vec<(TileRect, image::ImageBuffer<P, Vec<P::Subpixel>>)>
where
    P: image::Pixel + 'static,
{
    tile_rects(image.width(), image.height(), spec)
        .into_iter()
        .map(|r| {
            let view = image::imageops::crop_imm(image, r.x, r.y, r.width, r.height);
            (r, view.to_image())
        })
        .collect()
}
