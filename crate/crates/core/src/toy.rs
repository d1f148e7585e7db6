//! Deterministic synthetic inspection dataset in the MVTec layout, with a
//! matching set of procedural textures.
//!
//! Normal images show a woven grid over a smooth shading field. Test defects
//! are high-contrast blobs and scratches with exact ground-truth masks.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{lattice_angles, min_max_normalize, perlin_field, procedural_texture};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub category: String,
    pub size: u32,
    pub n_train: usize,
    pub n_test_good: usize,
    /// Anomalous test images per defect type (`blob`, `scratch`).
    pub n_test_per_defect: usize,
    pub n_textures: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            category: "weave".into(),
            size: 64,
            n_train: 60,
            n_test_good: 20,
            n_test_per_defect: 10,
            n_textures: 8,
            seed: 7,
        }
    }
}

pub const DEFECT_TYPES: [&str; 2] = ["blob", "scratch"];

fn normal_image(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let n = size as usize;
    let shade = min_max_normalize(&perlin_field(n, n, &lattice_angles(2, 2, rng)));
    let period = 8.0;
    let (px, py): (f64, f64) = (rng.random_range(0.0..period), rng.random_range(0.0..period));
    let gain: f64 = rng.random_range(0.95..1.05);
    RgbImage::from_fn(size, size, |x, y| {
        let wx = (2.0 * PI * (x as f64 + px) / period).sin();
        let wy = (2.0 * PI * (y as f64 + py) / period).sin();
        let weave = 0.5 + 0.25 * wx * wy;
        let s = 0.85 + 0.15 * shade[[y as usize, x as usize]];
        let base = [0.55, 0.5, 0.4];
        let noise: f64 = rng.random_range(-0.01..0.01);
        let px = |c: usize| ((base[c] * weave * s * gain * 1.6 + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn paint(img: &mut RgbImage, mask: &mut GrayImage, color: [u8; 3], inside: impl Fn(f64, f64) -> bool) {
    let (w, h) = img.dimensions();
    for y in 0..h {
        for x in 0..w {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img.put_pixel(x, y, Rgb(color));
                mask.put_pixel(x, y, Luma([255]));
            }
        }
    }
}

/// Adds one defect of `kind` and returns its mask (255 inside).
fn add_defect(img: &mut RgbImage, kind: &str, rng: &mut ChaCha8Rng) -> GrayImage {
    let s = img.width() as f64;
    let mut mask = GrayImage::new(img.width(), img.height());
    let dark = rng.random_bool(0.5);
    let color = if dark { [20, 18, 15] } else { [245, 240, 230] };
    let (cx, cy) = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
    match kind {
        "blob" => {
            let (rx, ry) = (rng.random_range(0.05 * s..0.12 * s), rng.random_range(0.05 * s..0.12 * s));
            let th: f64 = rng.random_range(0.0..PI);
            let (sn, cs) = th.sin_cos();
            paint(img, &mut mask, color, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
        }
        _ => {
            let len = rng.random_range(0.25 * s..0.45 * s);
            let half_w = rng.random_range(0.02 * s..0.035 * s).max(1.0);
            let th: f64 = rng.random_range(0.0..PI);
            let (sn, cs) = th.sin_cos();
            paint(img, &mut mask, color, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let along = cs * dx + sn * dy;
                let across = -sn * dx + cs * dy;
                along.abs() <= len / 2.0 && across.abs() <= half_w
            });
        }
    }
    mask
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `<root>/<category>/{train,test,ground_truth}` and
/// `<root>/textures`. Output depends only on `spec`.
pub fn generate(root: &Path, spec: &ToySpec) -> Result<()> {
    let cat = root.join(&spec.category);
    let train = cat.join("train").join("good");
    let test_good = cat.join("test").join("good");
    mkdir(&train)?;
    mkdir(&test_good)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.n_train {
        save_rgb(&normal_image(spec.size, &mut rng), &train.join(format!("{i:03}.png")))?;
    }
    for i in 0..spec.n_test_good {
        save_rgb(&normal_image(spec.size, &mut rng), &test_good.join(format!("{i:03}.png")))?;
    }
    for kind in DEFECT_TYPES {
        let dir = cat.join("test").join(kind);
        let gt = cat.join("ground_truth").join(kind);
        mkdir(&dir)?;
        mkdir(&gt)?;
        for i in 0..spec.n_test_per_defect {
            let mut img = normal_image(spec.size, &mut rng);
            let mask = add_defect(&mut img, kind, &mut rng);
            save_rgb(&img, &dir.join(format!("{i:03}.png")))?;
            save_gray(&mask, &gt.join(format!("{i:03}_mask.png")))?;
        }
    }
    let tex = root.join("textures");
    mkdir(&tex)?;
    for i in 0..spec.n_textures {
        save_rgb(&procedural_texture(i, spec.size as usize, &mut rng), &tex.join(format!("tex_{i:02}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::scan_layout;

    #[test]
    fn layout_counts_and_determinism() -> Result<()> {
        let spec = ToySpec {
            n_train: 4,
            n_test_good: 2,
            n_test_per_defect: 2,
            n_textures: 2,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), &spec)?;
        generate(b.path(), &spec)?;
        let idx = scan_layout(a.path(), "weave")?;
        assert_eq!(idx.train().len(), 4);
        assert_eq!(idx.test().len(), 6);
        assert_eq!(idx.test().iter().filter(|e| e.mask.is_some()).count(), 4);
        for e in idx.entries.iter() {
            let rel = e.image.strip_prefix(a.path()).unwrap();
            let x = image::open(&e.image).unwrap().to_rgb8();
            let y = image::open(b.path().join(rel)).unwrap().to_rgb8();
            assert_eq!(x, y);
        }
        Ok(())
    }
}
