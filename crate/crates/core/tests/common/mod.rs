//! Shared helpers and brute-force reference implementations.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::PathBuf;

use cfrg::config::Config;
use ndarray::Array2;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// The committed mini-dataset.
pub fn toy_root() -> PathBuf {
    fixtures().join("toy")
}

/// Desk preset pointed at the committed mini-dataset.
pub fn toy_config() -> Config {
    let mut cfg = Config::desk();
    cfg.dataset.root = toy_root();
    cfg.dataset.categories = vec!["weave".into()];
    cfg.synth.texture_root = toy_root().join("textures");
    cfg
}

/// Fraction of positive-negative pairs ranked correctly, ties counting half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn unique_descending(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v.dedup();
    v
}

/// Sum of recall increments times precision, recounting the confusion
/// matrix from scratch at every distinct threshold.
pub fn ap_exhaustive(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in unique_descending(scores.iter().copied()) {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// 8-connected regions by breadth-first flood fill, as pixel lists.
pub fn regions_bfs(mask: &Array2<u8>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || seen[[y, x]] {
                continue;
            }
            let mut region = Vec::new();
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                region.push((cy, cx));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(region);
        }
    }
    out
}

/// Normalized area under the mean region-overlap curve up to `fpr_limit`.
/// Every distinct score is a threshold; a pixel is predicted anomalous when
/// its score is at least the threshold. The curve starts at the origin.
pub fn pro_exhaustive(scores: &[Array2<f64>], masks: &[Array2<u8>], fpr_limit: f64) -> f64 {
    let regions: Vec<(usize, Vec<(usize, usize)>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| regions_bfs(m).into_iter().map(move |r| (i, r)))
        .collect();
    let normals: usize = masks.iter().map(|m| m.iter().filter(|&&v| v == 0).count()).sum();
    let mut curve = vec![(0.0, 0.0)];
    for t in unique_descending(scores.iter().flat_map(|s| s.iter().copied())) {
        let mut fp = 0usize;
        for (s, m) in scores.iter().zip(masks) {
            for (v, g) in s.iter().zip(m.iter()) {
                if *g == 0 && *v >= t {
                    fp += 1;
                }
            }
        }
        let overlap: f64 = regions
            .iter()
            .map(|(i, r)| r.iter().filter(|&&(y, x)| scores[*i][[y, x]] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fp as f64 / normals as f64, overlap));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((f0, p0), (f1, p1)) = (pair[0], pair[1]);
        if f0 >= fpr_limit {
            break;
        }
        if f1 > fpr_limit {
            let p = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0);
            area += (fpr_limit - f0) * (p0 + p) / 2.0;
            break;
        }
        area += (f1 - f0) * (p0 + p1) / 2.0;
    }
    area / fpr_limit
}
