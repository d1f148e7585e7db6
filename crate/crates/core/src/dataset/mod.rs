//! MVTec-style dataset ingestion.
//!
//! Expected tree for one category:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect>/*.png        ("good" for normals)
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

mod preprocess;
mod tile;

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{preprocess_dir, TileManifest, TileManifestEntry};
pub use tile::{axis_offsets, tile_image, tile_rects, TileRect, TileSpec};

pub const GOOD: &str = "good";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

/// One image of the index with its resolved mask path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub split: Split,
    pub defect_type: String,
    pub label: Label,
    pub source_id: String,
}

/// Immutable enumeration of every sample of one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub entries: Vec<SampleEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn train(&self) -> Vec<SampleEntry> {
        self.split(Split::Train).cloned().collect()
    }

    pub fn test(&self) -> Vec<SampleEntry> {
        self.split(Split::Test).cloned().collect()
    }

    /// Root-relative listing, stable across machines. Used for golden
    /// comparisons.
    pub fn manifest(&self) -> serde_json::Value {
        let rel = |p: &Path| {
            p.strip_prefix(&self.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let entries: Vec<_> = self
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "image": rel(&e.image),
                    "mask": e.mask.as_deref().map(rel),
                    "split": e.split,
                    "defect_type": e.defect_type,
                    "label": e.label,
                    "source_id": e.source_id,
                })
            })
            .collect();
        serde_json::json!({ "category": self.category, "entries": entries })
    }
}

pub(crate) fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

pub(crate) fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_children(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_children(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect())
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    for suffix in ["_mask", ""] {
        for ext in IMAGE_EXTENSIONS {
            let candidate = gt_dir.join(format!("{stem}{suffix}.{ext}"));
            if candidate.is_file() {
                return Some(candidate);
            }
        }
    }
    None
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Enumerates the train and test samples of `category` under `root`.
pub fn scan_layout(root: &Path, category: &str) -> Result<DatasetIndex> {
    let cat_dir = root.join(category);
    let malformed = |path: &Path, reason: &str| Error::MalformedTree {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if !cat_dir.is_dir() {
        return Err(malformed(&cat_dir, "category directory does not exist"));
    }
    let train_dir = cat_dir.join("train");
    let test_dir = cat_dir.join("test");
    if !train_dir.is_dir() || !test_dir.is_dir() {
        return Err(malformed(&cat_dir, "expected train/ and test/ subdirectories"));
    }
    let gt_root = cat_dir.join("ground_truth");

    let mut entries = Vec::new();
    for sub in subdirs(&train_dir)? {
        let defect = dir_name(&sub);
        if defect != GOOD {
            return Err(malformed(
                &sub,
                "train split may only contain a 'good' subfolder",
            ));
        }
        for image in images_in(&sub)? {
            entries.push(SampleEntry {
                source_id: format!("{category}/train/{defect}/{}", stem(&image)),
                image,
                mask: None,
                split: Split::Train,
                defect_type: defect.clone(),
                label: Label::Normal,
            });
        }
    }
    if entries.is_empty() {
        return Err(malformed(&train_dir, "no training images under train/good"));
    }

    for sub in subdirs(&test_dir)? {
        let defect = dir_name(&sub);
        let anomalous = defect != GOOD;
        for image in images_in(&sub)? {
            let s = stem(&image);
            let mask = if anomalous {
                let gt_dir = gt_root.join(&defect);
                let found = find_mask(&gt_dir, &s).ok_or_else(|| Error::MissingMask {
                    image: image.clone(),
                    expected: gt_dir.join(format!("{s}_mask.png")),
                })?;
                Some(found)
            } else {
                None
            };
            entries.push(SampleEntry {
                source_id: format!("{category}/test/{defect}/{s}"),
                image,
                mask,
                split: Split::Test,
                defect_type: defect.clone(),
                label: if anomalous {
                    Label::Anomalous
                } else {
                    Label::Normal
                },
            });
        }
    }
    entries.sort_by(|a, b| a.image.cmp(&b.image));

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        category: category.to_string(),
        entries,
    })
}

/// Per-channel input statistics of the teacher's pretraining distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    /// HWC image in [0,1] to a normalized CHW buffer.
    pub fn to_chw(&self, image: &Array3<f32>) -> Vec<f32> {
        let (h, w, _) = image.dim();
        let mut out = vec![0f32; 3 * h * w];
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = (image[[y, x, c]] - m) / s;
                }
            }
        }
        out
    }
}

/// A decoded sample. `image` is HWC in [0,1]; `mask` is binary {0,1}.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
    pub label: Label,
    pub source_id: String,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Mask, or an all-zeros mask for normal samples.
    pub fn mask_or_zeros(&self) -> Array2<u8> {
        self.mask
            .clone()
            .unwrap_or_else(|| Array2::zeros((self.height(), self.width())))
    }
}

pub(crate) fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Decode {
            path: path.to_path_buf(),
            source,
        },
    })
}

pub fn rgb_to_array(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn array_to_rgb(arr: &Array3<f32>) -> image::RgbImage {
    let (h, w, _) = arr.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (arr[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Nearest-neighbor resize of a binary mask; output is re-binarized.
pub fn resize_mask_nearest(mask: &Array2<u8>, height: usize, width: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize).min(w - 1);
        u8::from(mask[[sy, sx]] != 0)
    })
}

pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let gray = open_image(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32)[0] != 0)
    }))
}

/// Decodes an entry and resizes it to `resolution` x `resolution`.
pub fn load_sample(entry: &SampleEntry, resolution: usize) -> Result<ImageSample> {
    let img = open_image(&entry.image)?.to_rgb8();
    let r = resolution as u32;
    let resized = if img.dimensions() == (r, r) {
        img
    } else {
        image::imageops::resize(&img, r, r, FilterType::Triangle)
    };
    let image = rgb_to_array(&resized);
    let mask = match &entry.mask {
        Some(p) => {
            let m = resize_mask_nearest(&load_mask(p)?, resolution, resolution);
            assert_eq!(m.dim(), (image.dim().0, image.dim().1));
            Some(m)
        }
        None => None,
    };
    Ok(ImageSample {
        image,
        mask,
        label: entry.label,
        source_id: entry.source_id.clone(),
    })
}
