//! Score-map fusion, Gaussian smoothing, image-level scoring and the on-disk
//! prediction formats.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distill::cosine_distance_level;
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::nn;

/// How a pixel map is reduced to one image score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ImageScoring {
    Max,
    TopKMean { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub sigma: f64,
    pub image_scoring: ImageScoring,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            image_scoring: ImageScoring::Max,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("infer.sigma must be a finite non-negative number, got {}", self.sigma)));
        }
        if let ImageScoring::TopKMean { k: 0 } = self.image_scoring {
            return Err(Error::Config("infer.image_scoring.k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Full-resolution anomaly map and its image-level score.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScoreMap {
    pub pixel_scores: Array2<f32>,
    pub image_score: f64,
}

impl AnomalyScoreMap {
    /// Wraps a map, scoring the image by its maximum.
    pub fn from_pixels(pixel_scores: Array2<f32>) -> Self {
        let image_score = image_score(&pixel_scores, ImageScoring::Max);
        Self {
            pixel_scores,
            image_score,
        }
    }
}

pub fn image_score(map: &Array2<f32>, scoring: ImageScoring) -> f64 {
    match scoring {
        ImageScoring::Max => map.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v))),
        ImageScoring::TopKMean { k } => {
            let mut v: Vec<f64> = map.iter().map(|&x| f64::from(x)).collect();
            v.sort_unstable_by(|a, b| b.total_cmp(a));
            let k = k.min(v.len()).max(1);
            v[..k].iter().sum::<f64>() / k as f64
        }
    }
}

/// Mean over levels of the per-level `1 - cos` map, each bilinearly
/// upsampled to `out_h x out_w`. Returns `[B, out_h, out_w]`.
pub fn recovery_similarity_map(teacher: &FeaturePyramid, recovered: &FeaturePyramid, out_h: usize, out_w: usize) -> Result<Tensor> {
    teacher.check_aligned(recovered)?;
    let mut acc: Option<Tensor> = None;
    for (t, r) in teacher.levels.iter().zip(&recovered.levels) {
        let d = cosine_distance_level(t, r)?.unsqueeze(1)?;
        let up = nn::resize_bilinear(&d, out_h, out_w)?.squeeze(1)?;
        acc = Some(match acc {
            Some(a) => (a + up)?,
            None => up,
        });
    }
    let n = teacher.levels.len() as f64;
    Ok((acc.ok_or_else(|| Error::Shape("empty pyramid".into()))? / n)?)
}

/// Splits a `[B, H, W]` tensor into host maps.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, h, w) = t.dims3()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).expect("slice length matches shape"))
        .collect())
}

/// Normalized discrete Gaussian with radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_axis(src: &Array2<f64>, kernel: &[f64], axis: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let r = (kernel.len() / 2) as i64;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let off = j as i64 - r;
                acc += kv
                    * if axis == 0 {
                        src[[reflect(y as i64 + off, h as i64), x]]
                    } else {
                        src[[y, reflect(x as i64 + off, w as i64)]]
                    };
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with reflect padding, computed in f64.
pub fn gaussian_blur(map: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let k = gaussian_kernel(sigma);
    let src = map.mapv(f64::from);
    blur_axis(&blur_axis(&src, &k, 0), &k, 1).mapv(|v| v as f32)
}

/// Adds the available maps, smooths, and scores. Either input may be absent
/// (recovery or segmentation branch disabled) but not both.
pub fn fuse_and_smooth(rec_map: Option<&Array2<f32>>, seg_probs: Option<&Array2<f32>>, cfg: &InferConfig) -> Result<AnomalyScoreMap> {
    let fused = match (rec_map, seg_probs) {
        (Some(r), Some(s)) => {
            if r.dim() != s.dim() {
                return Err(Error::Shape(format!("fusion of {:?} and {:?}", r.dim(), s.dim())));
            }
            r + s
        }
        (Some(m), None) | (None, Some(m)) => m.clone(),
        (None, None) => return Err(Error::Config("fusion needs at least one score source".into())),
    };
    if fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in fused anomaly map".into()));
    }
    let pixel_scores = gaussian_blur(&fused, cfg.sigma);
    let image_score = image_score(&pixel_scores, cfg.image_scoring);
    Ok(AnomalyScoreMap {
        pixel_scores,
        image_score,
    })
}

/// Value mapped to full scale in 16-bit heatmaps: recovery distance mean
/// (at most 2) plus a probability.
pub const HEATMAP_FULL_SCALE: f32 = 3.0;

/// Writes `map` as a 16-bit grayscale PNG over `[0, HEATMAP_FULL_SCALE]`.
pub fn write_heatmap_png16(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let data: Vec<u16> = map
        .iter()
        .map(|&v| ((v / HEATMAP_FULL_SCALE).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMapHeader {
    pub shape: [usize; 2],
    pub dtype: String,
    pub order: String,
    pub image_score: f64,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the map as little-endian row-major f32 plus a JSON header next to
/// it (same stem, `.json`).
pub fn write_raw_map(path: &Path, map: &AnomalyScoreMap) -> Result<()> {
    let (h, w) = map.pixel_scores.dim();
    let bytes: Vec<u8> = map.pixel_scores.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = RawMapHeader {
        shape: [h, w],
        dtype: "f32-le".into(),
        order: "row-major".into(),
        image_score: map.image_score,
    };
    let side = sidecar(path);
    fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&side, e))
}

pub fn read_raw_map(path: &Path) -> Result<AnomalyScoreMap> {
    let side = sidecar(path);
    let header: RawMapHeader = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [h, w] = header.shape;
    if bytes.len() != h * w * 4 {
        return Err(Error::Shape(format!("{}: {} bytes for shape {h}x{w}", path.display(), bytes.len())));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(AnomalyScoreMap {
        pixel_scores: Array2::from_shape_vec((h, w), values).expect("length checked"),
        image_score: header.image_score,
    })
}

/// Appends `id,score` to a CSV file, writing the header on creation.
pub fn append_score_csv(path: &Path, id: &str, score: f64) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "image,image_score").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{id},{score}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PyramidSource;
    use candle_core::Device;

    #[test]
    fn zero_inputs_give_zero_map() -> Result<()> {
        let z = Array2::<f32>::zeros((16, 16));
        let m = fuse_and_smooth(Some(&z), Some(&z), &InferConfig::default())?;
        assert!(m.pixel_scores.iter().all(|&v| v == 0.0));
        assert_eq!(m.image_score, 0.0);
        Ok(())
    }

    #[test]
    fn impulse_peak_and_mass() {
        let sigma = 4.0;
        let mut m = Array2::<f32>::zeros((65, 65));
        m[[32, 32]] = 1.0;
        let b = gaussian_blur(&m, sigma);
        let peak = f64::from(b[[32, 32]]);
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma)).abs() < 1e-4);
        let mass: f64 = b.iter().map(|&v| f64::from(v)).sum();
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constants() {
        let m = Array2::<f32>::from_elem((10, 7), 0.25);
        assert!(gaussian_blur(&m, 4.0).iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn single_source_and_empty_fusion() -> Result<()> {
        let r = Array2::<f32>::from_elem((8, 8), 0.5);
        assert!((fuse_and_smooth(Some(&r), None, &InferConfig::default())?.image_score - 0.5).abs() < 1e-6);
        assert!(fuse_and_smooth(None, None, &InferConfig::default()).is_err());
        Ok(())
    }

    #[test]
    fn top_k_scoring() {
        let m = ndarray::array![[1.0f32, 0.0], [0.5, 0.25]];
        assert_eq!(image_score(&m, ImageScoring::TopKMean { k: 2 }), 0.75);
        assert_eq!(image_score(&m, ImageScoring::Max), 1.0);
    }

    #[test]
    fn similarity_map_averages_levels() -> Result<()> {
        let dev = Device::Cpu;
        let mk = |a: f64, b: f64, s: usize| Tensor::cat(&[Tensor::full(a, (1, 1, s, s), &dev).unwrap(), Tensor::full(b, (1, 1, s, s), &dev).unwrap()], 1).unwrap();
        let t = FeaturePyramid::new(vec![mk(1.0, 0.0, 8), mk(1.0, 0.0, 4), mk(1.0, 0.0, 2)], PyramidSource::TeacherOnAnomalous)?;
        let r = FeaturePyramid::new(vec![mk(0.0, 1.0, 8), mk(1.0, 0.0, 4), mk(1.0, 0.0, 2)], PyramidSource::Recovery)?;
        let m = recovery_similarity_map(&t, &r, 32, 32)?;
        assert_eq!(m.dims(), &[1, 32, 32]);
        let maps = tensor_to_maps(&m)?;
        assert!(maps[0].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
        let z = recovery_similarity_map(&t, &t, 32, 32)?;
        assert!(tensor_to_maps(&z)?[0].iter().all(|&v| v.abs() < 1e-7));
        Ok(())
    }

    #[test]
    fn raw_map_round_trip() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        let m = AnomalyScoreMap::from_pixels(ndarray::array![[0.1f32, 2.5], [1.0, -0.0]]);
        write_raw_map(&p, &m)?;
        assert_eq!(read_raw_map(&p)?, m);
        write_heatmap_png16(&dir.path().join("a.png"), &m.pixel_scores)?;
        let img = image::open(dir.path().join("a.png")).unwrap().into_luma16();
        assert_eq!(img.get_pixel(1, 0).0[0], (2.5f32 / 3.0 * 65535.0).round() as u16);
        append_score_csv(&dir.path().join("s.csv"), "a", 0.5)?;
        append_score_csv(&dir.path().join("s.csv"), "b", 0.25)?;
        let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(csv, "image,image_score\na,0.5\nb,0.25\n");
        Ok(())
    }
}
