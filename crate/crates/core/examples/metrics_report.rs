//! Scores hand-built anomaly maps with the four metrics: image AUROC, pixel
//! AUROC, PRO up to 30% FPR, and pixel average precision.
//!
//! ```text
//! cargo run --example metrics_report
//! ```

use cfrg::infer::{fuse_and_smooth, InferConfig};
use cfrg::metrics::{evaluate_category, MetricsConfig, MetricsReport};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cfrg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = InferConfig::default();
    println!("{}", MetricsReport::CSV_HEADER);
    // Defect strength against background noise, from hopeless to easy.
    for strength in [0.0f32, 0.05, 0.2, 1.0] {
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for i in 0..20 {
            let mut seg = Array2::from_shape_fn((64, 64), |_| rng.random_range(0.0f32..0.3));
            let mut mask = Array2::<u8>::zeros((64, 64));
            if i % 2 == 1 {
                let (y, x) = (rng.random_range(0..48), rng.random_range(0..48));
                seg.slice_mut(s![y..y + 12, x..x + 12]).mapv_inplace(|v| v + strength);
                mask.slice_mut(s![y..y + 12, x..x + 12]).fill(1);
            }
            maps.push(fuse_and_smooth(None, Some(&seg), &cfg)?);
            masks.push(mask);
        }
        let r = evaluate_category(&format!("strength_{strength}"), &maps, &masks, &MetricsConfig::default())?;
        println!("{}", r.csv_row());
    }
    Ok(())
}
