//! Loads a checkpoint and writes 16-bit heatmaps, raw float maps and image
//! scores for a directory of images.
//!
//! ```text
//! cargo run --example infer_maps -- <checkpoint.safetensors> <image dir> <output dir>
//! ```
//!
//! The checkpoint can come from `train_toy` or `cfrg train`.

use std::path::PathBuf;

use cfrg::cli::run_infer;
use cfrg::train::read_meta;

fn main() -> cfrg::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let [ckpt, images, output] = args.as_slice() else {
        eprintln!("usage: infer_maps <checkpoint> <image dir> <output dir>");
        std::process::exit(2);
    };
    // The checkpoint carries its own configuration.
    let cfg = read_meta(ckpt)?.config;
    let n = run_infer(&cfg, ckpt, false, Some(images), output)?;
    println!("wrote {n} maps to {}", output.display());
    let scores = std::fs::read_to_string(output.join("scores.csv")).map_err(|e| cfrg::Error::io(output, e))?;
    for line in scores.lines().take(11) {
        println!("  {line}");
    }
    Ok(())
}
