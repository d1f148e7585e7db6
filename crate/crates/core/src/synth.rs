//! Synthetic defect generation: thresholded Perlin masks filled with blended
//! texture patches.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, ImageSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Inclusive range of lattice cell counts per axis; only powers of two
    /// inside the range are drawn.
    pub perlin_scale_range: [u32; 2],
    pub threshold: f64,
    pub blend_beta_range: [f64; 2],
    pub texture_root: PathBuf,
    /// Degrees.
    pub rotation_range: [f64; 2],
    pub synth_probability: f64,
    /// When set, the Perlin mask is intersected with pixels whose mean
    /// intensity exceeds this value.
    pub foreground_threshold: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            perlin_scale_range: [1, 32],
            threshold: 0.5,
            blend_beta_range: [0.2, 1.0],
            texture_root: PathBuf::new(),
            rotation_range: [-90.0, 90.0],
            synth_probability: 0.5,
            foreground_threshold: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("synth.threshold must lie in (0,1), got {}", self.threshold));
        }
        let [b0, b1] = self.blend_beta_range;
        if !(b0 > 0.0 && b0 <= b1 && b1 <= 1.0) {
            return bad(format!("synth.blend_beta_range must be within (0,1], got {b0}..{b1}"));
        }
        if !(0.0..=1.0).contains(&self.synth_probability) {
            return bad(format!(
                "synth.synth_probability must lie in [0,1], got {}",
                self.synth_probability
            ));
        }
        let [s0, s1] = self.perlin_scale_range;
        if s0 == 0 || s0 > s1 || self.scales().is_empty() {
            return bad(format!(
                "synth.perlin_scale_range must contain a power of two, got {s0}..{s1}"
            ));
        }
        if self.rotation_range[0] > self.rotation_range[1] {
            return bad("synth.rotation_range is reversed".into());
        }
        Ok(())
    }

    fn scales(&self) -> Vec<u32> {
        let [lo, hi] = self.perlin_scale_range;
        (0..31)
            .map(|e| 1u32 << e)
            .filter(|s| *s >= lo && *s <= hi)
            .collect()
    }
}

fn fade(t: f64) -> f64 {
    ((6.0 * t - 15.0) * t + 10.0) * t * t * t
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Random lattice gradient angles, `(res_y + 1) x (res_x + 1)`.
pub fn lattice_angles<R: Rng + ?Sized>(res_y: usize, res_x: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((res_y + 1, res_x + 1), |_| 2.0 * PI * rng.random::<f64>())
}

/// 2D gradient noise over an `height x width` grid with `res` lattice cells
/// per axis. Values are roughly in [-1, 1].
pub fn perlin_field(height: usize, width: usize, angles: &Array2<f64>) -> Array2<f64> {
    let (ry, rx) = (angles.dim().0 - 1, angles.dim().1 - 1);
    let grad = |iy: usize, ix: usize| {
        let a = angles[[iy, ix]];
        (a.cos(), a.sin())
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let gy = y as f64 * ry as f64 / height as f64;
        let gx = x as f64 * rx as f64 / width as f64;
        let iy = (gy.floor() as usize).min(ry - 1);
        let ix = (gx.floor() as usize).min(rx - 1);
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let dot = |g: (f64, f64), dy: f64, dx: f64| g.0 * dy + g.1 * dx;
        let n00 = dot(grad(iy, ix), fy, fx);
        let n10 = dot(grad(iy + 1, ix), fy - 1.0, fx);
        let n01 = dot(grad(iy, ix + 1), fy, fx - 1.0);
        let n11 = dot(grad(iy + 1, ix + 1), fy - 1.0, fx - 1.0);
        let (ty, tx) = (fade(fy), fade(fx));
        std::f64::consts::SQRT_2 * lerp(lerp(n00, n10, ty), lerp(n01, n11, ty), tx)
    })
}

/// Min-max normalizes to [0,1]. A constant field maps to all zeros.
pub fn min_max_normalize(field: &Array2<f64>) -> Array2<f64> {
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Array2::zeros(field.dim());
    }
    field.mapv(|v| (v - lo) / span)
}

/// Rotates about the image center with bilinear sampling; samples falling
/// outside the source are zero.
pub fn rotate_field(field: &Array2<f64>, degrees: f64) -> Array2<f64> {
    if degrees == 0.0 {
        return field.clone();
    }
    let (h, w) = field.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let sample = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
            return 0.0;
        }
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = lerp(field[[y0, x0]], field[[y0, x1]], fx);
        let bot = lerp(field[[y1, x0]], field[[y1, x1]], fx);
        lerp(top, bot, fy)
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // Inverse mapping: rotate the output coordinate back into the source.
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        sample(sy, sx)
    })
}

/// Strict threshold of a normalized field.
pub fn threshold_mask(normalized: &Array2<f64>, threshold: f64) -> Array2<u8> {
    normalized.mapv(|v| u8::from(v > threshold))
}

/// Draws a binary Perlin mask.
pub fn perlin_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    config: &SynthConfig,
    rng: &mut R,
) -> Array2<u8> {
    assert!(height >= 8 && width >= 8, "perlin_mask needs at least 8x8");
    let scales = config.scales();
    let ry = scales[rng.random_range(0..scales.len())] as usize;
    let rx = scales[rng.random_range(0..scales.len())] as usize;
    let angles = lattice_angles(ry, rx, rng);
    let field = min_max_normalize(&perlin_field(height, width, &angles));
    let [r0, r1] = config.rotation_range;
    let deg = if r1 > r0 { rng.random_range(r0..r1) } else { r0 };
    threshold_mask(&rotate_field(&field, deg), config.threshold)
}

/// Blends `texture` into `x_n` inside `mask` with opacity `beta`.
///
/// Unmasked pixels are copied bit for bit.
pub fn blend_anomaly(
    x_n: &Array3<f32>,
    texture: &Array3<f32>,
    mask: &Array2<u8>,
    beta: f32,
) -> Result<Array3<f32>> {
    let (h, w, c) = x_n.dim();
    if texture.dim() != (h, w, c) || mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "blend_anomaly: image {:?}, texture {:?}, mask {:?}",
            x_n.dim(),
            texture.dim(),
            mask.dim()
        )));
    }
    let mut out = x_n.clone();
    for ((y, x, ch), v) in out.indexed_iter_mut() {
        if mask[[y, x]] != 0 {
            let t = texture[[y, x, ch]];
            *v = (beta * t + (1.0 - beta) * *v).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Texture images resized to the working resolution.
#[derive(Debug, Clone, Default)]
pub struct TextureBank {
    textures: Vec<Array3<f32>>,
}

impl TextureBank {
    pub fn from_arrays(textures: Vec<Array3<f32>>) -> Self {
        Self { textures }
    }

    /// Loads every image under `root` (recursively), resized to
    /// `size x size`.
    pub fn load(root: &Path, size: usize) -> Result<Self> {
        if root.as_os_str().is_empty() || !root.is_dir() {
            return Err(Error::Config(format!(
                "synth.texture_root {} is not a directory",
                root.display()
            )));
        }
        let mut paths = Vec::new();
        collect(root, &mut paths)?;
        let textures = paths
            .iter()
            .map(|p| {
                let img = dataset::open_image(p)?.to_rgb8();
                let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
                Ok(dataset::rgb_to_array(&img))
            })
            .collect::<Result<Vec<_>>>()?;
        if textures.is_empty() {
            return Err(Error::Config(format!(
                "synth.texture_root {} holds no images",
                root.display()
            )));
        }
        Ok(Self { textures })
    }

    pub fn len(&self) -> usize {
        self.textures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.textures.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array3<f32> {
        &self.textures[i]
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    children.sort();
    for p in children {
        if p.is_dir() {
            collect(&p, out)?;
        } else if dataset::is_image(&p) {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthResult {
    pub image_a: Array3<f32>,
    pub mask: Array2<u8>,
    pub was_corrupted: bool,
}

fn foreground(image: &Array3<f32>, threshold: f64) -> Array2<u8> {
    let (h, w, _) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let m = (image[[y, x, 0]] + image[[y, x, 1]] + image[[y, x, 2]]) as f64 / 3.0;
        u8::from(m > threshold)
    })
}

/// Produces the corrupted training view of a normal sample.
pub fn synthesize<R: Rng + ?Sized>(
    x_n: &ImageSample,
    config: &SynthConfig,
    textures: &TextureBank,
    rng: &mut R,
) -> Result<SynthResult> {
    if textures.is_empty() {
        return Err(Error::Config("synth: empty texture bank".into()));
    }
    let (h, w) = (x_n.height(), x_n.width());
    let passthrough = || SynthResult {
        image_a: x_n.image.clone(),
        mask: Array2::zeros((h, w)),
        was_corrupted: false,
    };
    if rng.random::<f64>() >= config.synth_probability {
        return Ok(passthrough());
    }
    let mut mask = perlin_mask(h, w, config, rng);
    if let Some(t) = config.foreground_threshold {
        let fg = foreground(&x_n.image, t);
        mask.zip_mut_with(&fg, |m, f| *m &= *f);
    }
    let tex_idx = rng.random_range(0..textures.len());
    let [b0, b1] = config.blend_beta_range;
    let beta = if b1 > b0 { rng.random_range(b0..=b1) } else { b0 };
    if mask.iter().all(|&m| m == 0) {
        return Ok(passthrough());
    }
    let texture = textures.get(tex_idx);
    if texture.dim() != x_n.image.dim() {
        return Err(Error::Shape(format!(
            "texture {:?} does not match image {:?}",
            texture.dim(),
            x_n.image.dim()
        )));
    }
    let image_a = blend_anomaly(&x_n.image, texture, &mask, beta as f32)?;
    Ok(SynthResult {
        image_a,
        mask,
        was_corrupted: true,
    })
}

/// Procedurally generated texture, used when no external texture set is
/// available. `kind` cycles through noise, stripes, checks and speckle.
pub fn procedural_texture<R: Rng + ?Sized>(kind: usize, size: usize, rng: &mut R) -> image::RgbImage {
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let alt: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let field = match kind % 4 {
        0 => {
            let res = 1usize << rng.random_range(1..4);
            min_max_normalize(&perlin_field(size, size, &lattice_angles(res, res, rng)))
        }
        1 => {
            let freq = rng.random_range(2.0..10.0) * 2.0 * PI / size as f64;
            let theta = rng.random_range(0.0..PI);
            let (s, c) = theta.sin_cos();
            Array2::from_shape_fn((size, size), |(y, x)| {
                0.5 + 0.5 * (freq * (c * x as f64 + s * y as f64)).sin()
            })
        }
        2 => {
            let cell = rng.random_range(2..(size / 4).max(3));
            Array2::from_shape_fn((size, size), |(y, x)| ((y / cell + x / cell) % 2) as f64)
        }
        _ => Array2::from_shape_fn((size, size), |_| rng.random::<f64>()),
    };
    image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let t = field[[y as usize, x as usize]];
        let px = |c: usize| ((base[c] * (1.0 - t) + alt[c] * t) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}
