//! Tiles large inspection images into overlapping square windows.
//!
//! With no arguments a 2048x1024 demo image and its mask are generated in a
//! temporary directory first.
//!
//! ```text
//! cargo run --example preprocess_tiles -- <input dir> <output dir>
//! ```

use std::path::PathBuf;

use cfrg::dataset::{preprocess_dir, tile_rects, TileSpec};
use image::{GrayImage, Luma, Rgb, RgbImage};

fn main() -> cfrg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scratch = std::env::temp_dir().join("cfrg_tiles_demo");
    let (input, output) = match args.as_slice() {
        [i, o] => (PathBuf::from(i), PathBuf::from(o)),
        _ => {
            let input = scratch.join("in");
            std::fs::create_dir_all(input.join("gt")).map_err(|e| cfrg::Error::io(&input, e))?;
            let img = RgbImage::from_fn(2048, 1024, |x, y| Rgb([(x / 8) as u8, (y / 4) as u8, 90]));
            img.save(input.join("board.png")).map_err(|e| cfrg::Error::Decode { path: input.join("board.png"), source: e })?;
            let mask = GrayImage::from_fn(2048, 1024, |x, y| Luma([if (1400..1600).contains(&x) && y < 200 { 255 } else { 0 }]));
            let mp = input.join("gt/board_mask.png");
            mask.save(&mp).map_err(|e| cfrg::Error::Decode { path: mp.clone(), source: e })?;
            (input, scratch.join("out"))
        }
    };

    let spec = TileSpec::default();
    println!("stride {} px for windows of {} px", spec.stride(), spec.max_side);
    for r in tile_rects(2048, 1024, &spec) {
        println!("  2048x1024 window at x={} y={} size {}x{}", r.x, r.y, r.width, r.height);
    }

    let manifest = preprocess_dir(&input, &output, &spec)?;
    println!("{} tiles written to {}", manifest.entries.len(), output.display());
    for e in &manifest.entries {
        println!("  {} <- {} at {:?}", e.tile, e.source, e.offset);
    }
    Ok(())
}
