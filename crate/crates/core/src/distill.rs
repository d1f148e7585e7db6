//! Teacher-student cosine distances, the push-pull distillation loss and the
//! coarse anomaly weight derived from them.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;

pub(crate) const COS_EPS: f64 = 1e-8;

/// Per-level `[B, H_i, W_i]` maps of `1 - cos`, values in [0, 2].
#[derive(Debug, Clone)]
pub struct CosineDistanceMap {
    pub levels: Vec<Tensor>,
}

/// Per-level `[B, H_i, W_i]` weights in [0, 1]; low values mark anomalies.
#[derive(Debug, Clone)]
pub struct AnomalyWeight {
    pub levels: Vec<Tensor>,
}

impl AnomalyWeight {
    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| t.detach()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Push student features away from the teacher's on anomalous pixels.
    pub push_enabled: bool,
    /// Clamp the distance to [0, 1] inside the push term.
    pub clamp_push: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            push_enabled: true,
            clamp_push: true,
        }
    }
}

/// `1 - cos` along the channel axis of two `[B, C, H, W]` tensors.
pub fn cosine_distance_level(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cosine distance of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?;
    let nb = b.sqr()?.sum(1)?;
    let denom = (na * nb)?.maximum(COS_EPS * COS_EPS)?.sqrt()?;
    Ok((1.0 - (dot / denom)?)?)
}

pub fn cosine_distance(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<CosineDistanceMap> {
    a.check_aligned(b)?;
    let levels = a
        .levels
        .iter()
        .zip(&b.levels)
        .map(|(x, y)| cosine_distance_level(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(CosineDistanceMap { levels })
}

/// Source row index for each of `out` nearest-neighbor samples.
pub(crate) fn nearest_indices(out: usize, inp: usize) -> Vec<u32> {
    (0..out)
        .map(|o| (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1) as u32)
        .collect()
}

/// Nearest-neighbor resample of a `[B, H, W]` mask tensor.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, mh, mw) = mask.dims3()?;
    if (mh, mw) == (h, w) {
        return Ok(mask.clone());
    }
    let dev = mask.device();
    let rows = Tensor::new(nearest_indices(h, mh), dev)?;
    let cols = Tensor::new(nearest_indices(w, mw), dev)?;
    Ok(mask.index_select(&rows, 1)?.index_select(&cols, 2)?)
}

/// Push-pull distillation loss summed over levels, each level reduced by
/// its spatial (and batch) mean.
///
/// `mask` is the `[B, H, W]` binary ground truth at input resolution.
pub fn distill_loss(dist: &CosineDistanceMap, mask: &Tensor, cfg: &DistillConfig) -> Result<Tensor> {
    let mask = mask.to_dtype(dist.levels[0].dtype())?;
    let mut total: Option<Tensor> = None;
    for d in &dist.levels {
        let (_, h, w) = d.dims3()?;
        let g = downsample_mask(&mask, h, w)?;
        let normal = (1.0 - &g)?;
        let term = if cfg.push_enabled {
            let d_push = if cfg.clamp_push { d.clamp(0.0, 1.0)? } else { d.clone() };
            let pull = (&normal * d)?;
            let push = (&g * (1.0 - d_push)?)?;
            (pull + push)?.mean_all()?
        } else {
            let count = normal.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if count == 0.0 {
                log::warn!("distillation loss without push term: batch has no normal pixels");
                d.zeros_like()?.sum_all()?
            } else {
                ((&normal * d)?.sum_all()? / count)?
            }
        };
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape("empty distance map".into()))
}

/// `1 - clamp(D, 0, 1)`: 1 for identical directions, 0 from orthogonal on.
pub fn distill_weight(dist: &CosineDistanceMap) -> Result<AnomalyWeight> {
    let levels = dist
        .levels
        .iter()
        .map(|d| Ok((1.0 - d.clamp(0.0, 1.0)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyWeight { levels })
}

/// Mean distance of each level.
pub fn level_means(dist: &CosineDistanceMap) -> Result<Vec<f64>> {
    dist.levels
        .iter()
        .map(|d| Ok(d.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?))
        .collect()
}
