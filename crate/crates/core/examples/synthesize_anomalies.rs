//! Draws corrupted training views from normal toy images and writes each
//! view with its Perlin mask as PNGs.
//!
//! ```text
//! cargo run --example synthesize_anomalies -- /tmp/synth_views
//! ```

use std::path::PathBuf;

use cfrg::config::Config;
use cfrg::dataset::{array_to_rgb, scan_layout};
use cfrg::synth::{synthesize, SynthConfig, TextureBank};
use cfrg::toy::{generate, ToySpec};
use cfrg::train::{load_split, sample_rng};
use image::GrayImage;

fn main() -> cfrg::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_views".into()));
    let data = std::env::temp_dir().join("cfrg_synth_toy");
    let spec = ToySpec::default();
    generate(&data, &spec)?;
    let res = Config::desk().dataset.resolution;
    let index = scan_layout(&data, &spec.category)?;
    let samples = load_split(&index.train()[..6], res)?;
    let textures = TextureBank::load(&data.join("textures"), res)?;
    std::fs::create_dir_all(&out).map_err(|e| cfrg::Error::io(&out, e))?;

    // Certain corruption so every view shows a defect.
    let cfg = SynthConfig {
        synth_probability: 1.0,
        perlin_scale_range: [1, 8],
        ..SynthConfig::default()
    };
    for (i, s) in samples.iter().enumerate() {
        let v = synthesize(s, &cfg, &textures, &mut sample_rng(7, 0, i as u64))?;
        let area = v.mask.iter().filter(|&&m| m != 0).count() as f64 / v.mask.len() as f64;
        let (h, w) = v.mask.dim();
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([255 * v.mask[[y as usize, x as usize]]]));
        let ip = out.join(format!("{i:02}_view.png"));
        let mp = out.join(format!("{i:02}_mask.png"));
        array_to_rgb(&v.image_a).save(&ip).map_err(|e| cfrg::Error::Decode { path: ip.clone(), source: e })?;
        mask.save(&mp).map_err(|e| cfrg::Error::Decode { path: mp.clone(), source: e })?;
        println!("{}: corrupted {} mask area {:.1}%", s.source_id, v.was_corrupted, 100.0 * area);
    }
    println!("views written to {}", out.display());
    Ok(())
}
