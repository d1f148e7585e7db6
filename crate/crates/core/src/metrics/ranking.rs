//! Rank-based AUROC and threshold-sweep average precision.

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Indices of `scores` sorted by descending score.
pub(crate) fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * pos as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Step-wise area under the precision-recall curve over descending unique
/// thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let idx = descending_order(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_fixtures() -> Result<()> {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false])?, 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true])?, 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])?, 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        Ok(())
    }

    #[test]
    fn ap_fixtures() -> Result<()> {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false])?, 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true])?;
        assert!((ap - 0.833_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(average_precision(&[0.3, 0.1, 0.2], &[true, true, true])?, 1.0);
        assert!(average_precision(&[0.3, 0.1], &[false, false]).is_err());
        Ok(())
    }
}
