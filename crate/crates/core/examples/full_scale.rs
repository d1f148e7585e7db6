//! Full-scale run on an MVTec AD tree with the pretrained backbones: trains
//! one model per category at 256 px for the configured epochs, then reports
//! the four metrics per category and their mean.
//!
//! ```text
//! cargo run --release --example full_scale -- <mvtec root> <weights dir> [category ...]
//! ```
//!
//! The weights directory must hold `wide_resnet50_2.safetensors` and
//! `efficientnet_b0.safetensors` with torchvision parameter names. Textures
//! are read from `<mvtec root>/../dtd/images` unless `CFRG_TEXTURES` is set.

use std::path::PathBuf;

use cfrg::cli::{run_eval, run_train};
use cfrg::config::Config;
use cfrg::metrics::MetricsReport;

const CATEGORIES: [&str; 15] = [
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut", "pill", "screw", "tile",
    "toothbrush", "transistor", "wood", "zipper",
];

fn main() -> cfrg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: full_scale <mvtec root> <weights dir> [category ...]");
        std::process::exit(2);
    }
    let root = PathBuf::from(&args[0]);
    let mut cfg = Config::default();
    cfg.dataset.root = root.clone();
    cfg.model.backbone.weights_dir = PathBuf::from(&args[1]);
    cfg.synth.texture_root = std::env::var_os("CFRG_TEXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("../dtd/images"));
    cfg.train.output_dir = PathBuf::from("runs/full_scale");
    cfg.dataset.categories = if args.len() > 2 {
        args[2..].to_vec()
    } else {
        CATEGORIES.iter().map(|c| c.to_string()).collect()
    };
    cfg.validate()?;
    run_train(&cfg, None)?;
    let reports = run_eval(&cfg, None, None, false, &cfg.train.output_dir)?;
    println!("{}", MetricsReport::CSV_HEADER);
    for r in &reports {
        println!("{}", r.csv_row());
    }
    Ok(())
}
