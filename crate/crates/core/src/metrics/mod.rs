//! Image- and pixel-level detection metrics and per-category reports.

mod components;
mod pro;
mod ranking;

pub use components::label_components;
pub use pro::{pro_curve, pro_score, ProCurve, DEFAULT_FPR_LIMIT, DEFAULT_MAX_THRESHOLDS};
pub use ranking::{auroc, average_precision};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::AnomalyScoreMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Upper FPR bound of the PRO integral.
    pub fpr_limit: f64,
    /// Pool pixels of all images for P-AUROC and AP; otherwise average
    /// per-image values over the images where they are defined.
    pub pooled_pixels: bool,
    pub max_pro_thresholds: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fpr_limit: DEFAULT_FPR_LIMIT,
            pooled_pixels: true,
            max_pro_thresholds: DEFAULT_MAX_THRESHOLDS,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::Config(format!("metrics.fpr_limit must lie in (0, 1], got {}", self.fpr_limit)));
        }
        if self.max_pro_thresholds < 2 {
            return Err(Error::Config("metrics.max_pro_thresholds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub category: String,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub p_pro: f64,
    pub ap: f64,
    pub n_images: usize,
    pub n_defect_images: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "category,i_auroc,p_auroc,p_pro,ap,n_images,n_defect_images";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.category, self.i_auroc, self.p_auroc, self.p_pro, self.ap, self.n_images, self.n_defect_images
        )
    }

    pub fn metrics(&self) -> [f64; 4] {
        [self.i_auroc, self.p_auroc, self.p_pro, self.ap]
    }
}

fn per_image_mean(values: Vec<Result<f64>>, what: &str) -> Result<f64> {
    let defined: Vec<f64> = values
        .into_iter()
        .filter_map(|v| match v {
            Err(Error::UndefinedMetric(_)) => None,
            other => Some(other),
        })
        .collect::<Result<_>>()?;
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(format!("{what} undefined on every image")));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// All four metrics for one category. `masks[i]` is the ground truth of
/// `predictions[i]` (all zeros for normal images).
pub fn evaluate_category(
    category: &str,
    predictions: &[AnomalyScoreMap],
    masks: &[Array2<u8>],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let context = |e: Error| match e {
        Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("category {category}: {m}")),
        other => other,
    };
    if predictions.len() != masks.len() {
        return Err(Error::Shape(format!(
            "category {category}: {} predictions vs {} masks",
            predictions.len(),
            masks.len()
        )));
    }
    let image_labels: Vec<bool> = masks.iter().map(|m| m.iter().any(|&v| v != 0)).collect();
    let image_scores: Vec<f64> = predictions.iter().map(|p| p.image_score).collect();
    let i_auroc = auroc(&image_scores, &image_labels).map_err(context)?;

    let maps: Vec<Array2<f64>> = predictions.iter().map(|p| p.pixel_scores.mapv(f64::from)).collect();
    for (m, g) in maps.iter().zip(masks) {
        if m.dim() != g.dim() {
            return Err(Error::Shape(format!("category {category}: map {:?} vs mask {:?}", m.dim(), g.dim())));
        }
    }
    let (p_auroc, ap) = if cfg.pooled_pixels {
        let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().map(|&v| v != 0)).collect();
        (
            auroc(&scores, &labels).map_err(context)?,
            average_precision(&scores, &labels).map_err(context)?,
        )
    } else {
        let per = |f: fn(&[f64], &[bool]) -> Result<f64>| {
            maps.iter()
                .zip(masks)
                .map(|(m, g)| {
                    let s: Vec<f64> = m.iter().copied().collect();
                    let l: Vec<bool> = g.iter().map(|&v| v != 0).collect();
                    f(&s, &l)
                })
                .collect::<Vec<_>>()
        };
        (
            per_image_mean(per(auroc), "P-AUROC").map_err(context)?,
            per_image_mean(per(average_precision), "AP").map_err(context)?,
        )
    };
    let p_pro = pro_score(&maps, masks, cfg.fpr_limit, cfg.max_pro_thresholds).map_err(context)?;
    Ok(MetricsReport {
        category: category.to_string(),
        i_auroc,
        p_auroc,
        p_pro,
        ap,
        n_images: predictions.len(),
        n_defect_images: image_labels.iter().filter(|&&l| l).count(),
    })
}

/// Arithmetic mean over category rows, labelled `mean`.
pub fn mean_row(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::UndefinedMetric("mean of zero categories".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        category: "mean".into(),
        i_auroc: mean(|r| r.i_auroc),
        p_auroc: mean(|r| r.p_auroc),
        p_pro: mean(|r| r.p_pro),
        ap: mean(|r| r.ap),
        n_images: reports.iter().map(|r| r.n_images).sum(),
        n_defect_images: reports.iter().map(|r| r.n_defect_images).sum(),
    })
}
