//! Trains the full model and its five ablations on the toy dataset over
//! several seeds and prints the mean metrics as a markdown table.
//!
//! ```text
//! cargo run --example ablation_table -- 0,1,2
//! ```

use cfrg::config::Config;
use cfrg::dataset::scan_layout;
use cfrg::synth::TextureBank;
use cfrg::toy::{generate, ToySpec};
use cfrg::train;

fn main() -> cfrg::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "0,1,2".into())
        .split(',')
        .map(|s| s.trim().parse().expect("seeds are comma-separated integers"))
        .collect();
    let spec = ToySpec::default();
    let root = std::env::temp_dir().join("cfrg_ablation_toy");
    generate(&root, &spec)?;
    let mut cfg = Config::desk();
    cfg.dataset.root = root.clone();
    cfg.synth.texture_root = root.join("textures");
    let index = scan_layout(&root, &spec.category)?;
    let tr = train::load_split(&index.train(), cfg.dataset.resolution)?;
    let te = train::load_split(&index.test(), cfg.dataset.resolution)?;
    let tex = TextureBank::load(&cfg.synth.texture_root, cfg.dataset.resolution)?;
    let table = train::ablation_matrix(&cfg, &spec.category, &seeds, &tr, &te, &tex)?;
    for r in &table.rows {
        let per_seed: Vec<String> = r.per_seed.iter().map(|m| format!("{:.3?}", m.metrics())).collect();
        println!("{:5} per seed [I-AUROC, P-AUROC, P-PRO, AP]: {}", r.variant, per_seed.join(" "));
    }
    print!("{}", table.to_markdown());
    Ok(())
}
