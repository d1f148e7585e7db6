//! Generates the synthetic inspection mini-dataset in the MVTec layout and
//! prints its index.
//!
//! ```text
//! cargo run --example toy_dataset -- /tmp/toy
//! ```

use std::path::PathBuf;

use cfrg::dataset::{scan_layout, Label, Split};
use cfrg::toy::{generate, ToySpec};

fn main() -> cfrg::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy_data".into()));
    let spec = ToySpec::default();
    generate(&root, &spec)?;
    let index = scan_layout(&root, &spec.category)?;
    let count = |split, label| {
        index
            .entries
            .iter()
            .filter(|e| e.split == split && e.label == label)
            .count()
    };
    println!("dataset written to {}", root.display());
    println!("  train normal   {}", count(Split::Train, Label::Normal));
    println!("  test normal    {}", count(Split::Test, Label::Normal));
    println!("  test anomalous {}", count(Split::Test, Label::Anomalous));
    println!("  textures       {}", root.join("textures").display());
    let manifest = root.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_vec_pretty(&index.manifest())?)
        .map_err(|e| cfrg::Error::io(&manifest, e))?;
    println!("manifest written to {}", manifest.display());
    Ok(())
}
