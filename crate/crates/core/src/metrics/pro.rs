//! Per-region overlap curve integrated over the false-positive rate.

use ndarray::Array2;
use rayon::prelude::*;

use super::components::label_components;
use super::ranking::descending_order;
use crate::error::{Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_MAX_THRESHOLDS: usize = 5000;

/// Curve points `(fpr, mean region overlap)` starting at `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProCurve {
    pub points: Vec<(f64, f64)>,
}

impl ProCurve {
    /// Trapezoidal area up to `fpr_limit`, interpolating the last segment and
    /// dividing by `fpr_limit`.
    pub fn normalized_area(&self, fpr_limit: f64) -> f64 {
        let mut area = 0.0;
        for pair in self.points.windows(2) {
            let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
            if x0 >= fpr_limit {
                break;
            }
            if x1 <= fpr_limit {
                area += (x1 - x0) * (y0 + y1) / 2.0;
            } else {
                let y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
                area += (fpr_limit - x0) * (y0 + y_lim) / 2.0;
                break;
            }
        }
        area / fpr_limit
    }
}

/// Descending thresholds: every unique score when there are at most
/// `max_thresholds`, else that many evenly spaced order statistics
/// (always including the maximum and minimum).
fn thresholds(sorted_desc: &[f64], max_thresholds: usize) -> Vec<f64> {
    let mut unique: Vec<f64> = Vec::new();
    for &s in sorted_desc {
        if unique.last() != Some(&s) {
            unique.push(s);
        }
    }
    if unique.len() <= max_thresholds {
        return unique;
    }
    let n = sorted_desc.len();
    let m = max_thresholds.max(2);
    let mut out: Vec<f64> = Vec::with_capacity(m);
    for k in 0..m {
        let s = sorted_desc[((k as f64) * (n - 1) as f64 / (m - 1) as f64).round() as usize];
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

/// Sweeps thresholds over pooled pixels. A pixel is predicted anomalous when
/// its score is at least the threshold.
pub fn pro_curve(scores: &[Array2<f64>], masks: &[Array2<u8>], max_thresholds: usize) -> Result<ProCurve> {
    if scores.len() != masks.len() {
        return Err(Error::Shape(format!("{} score maps vs {} masks", scores.len(), masks.len())));
    }
    for (s, m) in scores.iter().zip(masks) {
        if s.dim() != m.dim() {
            return Err(Error::Shape(format!("score map {:?} vs mask {:?}", s.dim(), m.dim())));
        }
    }
    let labeled: Vec<(Array2<u32>, usize)> = masks.par_iter().map(label_components).collect();
    // Global region ids; index 0 means a normal pixel.
    let mut region_of = Vec::new();
    let mut flat_scores = Vec::new();
    let mut region_size = vec![0usize];
    for ((labels, count), s) in labeled.iter().zip(scores) {
        let base = region_size.len() as u32 - 1;
        region_size.extend(std::iter::repeat_n(0, *count));
        for (&l, &v) in labels.iter().zip(s.iter()) {
            let r = if l == 0 { 0 } else { base + l };
            region_size[r as usize] += 1;
            region_of.push(r);
            flat_scores.push(v);
        }
    }
    let n_regions = region_size.len() - 1;
    let n_normal = region_size[0];
    if n_regions == 0 {
        return Err(Error::UndefinedMetric("PRO needs at least one defect region".into()));
    }
    if n_normal == 0 {
        return Err(Error::UndefinedMetric("PRO needs normal pixels for the FPR axis".into()));
    }
    if flat_scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let order = descending_order(&flat_scores);
    let sorted: Vec<f64> = order.iter().map(|&i| flat_scores[i]).collect();
    let mut points = vec![(0.0, 0.0)];
    let mut covered = vec![0usize; region_size.len()];
    let (mut fp, mut cursor) = (0usize, 0usize);
    for t in thresholds(&sorted, max_thresholds) {
        while cursor < order.len() && sorted[cursor] >= t {
            match region_of[order[cursor]] {
                0 => fp += 1,
                r => covered[r as usize] += 1,
            }
            cursor += 1;
        }
        // Summed from counts at every step so no rounding error accumulates.
        let overlap_sum: f64 = (1..region_size.len()).map(|r| covered[r] as f64 / region_size[r] as f64).sum();
        points.push((fp as f64 / n_normal as f64, overlap_sum / n_regions as f64));
    }
    Ok(ProCurve { points })
}

/// Normalized area under the PRO curve up to `fpr_limit`.
pub fn pro_score(scores: &[Array2<f64>], masks: &[Array2<u8>], fpr_limit: f64, max_thresholds: usize) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    Ok(pro_curve(scores, masks, max_thresholds)?.normalized_area(fpr_limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction_scores_one() -> Result<()> {
        let m = array![[0u8, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0], [1, 0, 0, 0]];
        let s = m.mapv(|v| v as f64);
        assert!((pro_score(&[s], &[m], 0.3, 5000)? - 1.0).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn two_region_operating_point() -> Result<()> {
        // Region sizes 9 and 1; only the large one scores high.
        let mut m = Array2::<u8>::zeros((6, 6));
        m.slice_mut(ndarray::s![0..3, 0..3]).fill(1);
        m[[5, 5]] = 1;
        let mut s = Array2::<f64>::zeros((6, 6));
        s.slice_mut(ndarray::s![0..3, 0..3]).fill(1.0);
        let c = pro_curve(&[s], &[m], 5000)?;
        assert_eq!(c.points[1], (0.0, 0.5));
        Ok(())
    }

    #[test]
    fn constant_scores_form_the_diagonal() -> Result<()> {
        let m = array![[1u8, 0], [0, 0]];
        let s = Array2::<f64>::from_elem((2, 2), 0.7);
        let c = pro_curve(&[s.clone()], &[m.clone()], 5000)?;
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((pro_score(&[s], &[m], 0.3, 5000)? - 0.15).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn quantile_thresholds_keep_extremes() {
        let sorted: Vec<f64> = (0..10_000).rev().map(|i| i as f64).collect();
        let t = thresholds(&sorted, 5000);
        assert_eq!(t.len(), 5000);
        assert_eq!(t[0], 9999.0);
        assert_eq!(*t.last().unwrap(), 0.0);
    }

    #[test]
    fn undefined_cases() {
        let z = Array2::<u8>::zeros((3, 3));
        let o = Array2::<u8>::ones((3, 3));
        let s = Array2::<f64>::zeros((3, 3));
        assert!(matches!(pro_curve(&[s.clone()], &[z], 5000), Err(Error::UndefinedMetric(_))));
        assert!(matches!(pro_curve(&[s], &[o], 5000), Err(Error::UndefinedMetric(_))));
    }
}
